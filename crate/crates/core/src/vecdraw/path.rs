//! `d` attribute parser for single-subpath paths built from `M`, `L` and
//! circular `A` commands (absolute or relative).

use super::{Point, Result, Segment, VecdrawError};

struct Lexer<'a> {
    s: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn skip_sep(&mut self) {
        while self.pos < self.s.len()
            && (self.s[self.pos].is_ascii_whitespace() || self.s[self.pos] == b',')
        {
            self.pos += 1;
        }
    }

    fn peek_command(&mut self) -> Option<u8> {
        self.skip_sep();
        self.s
            .get(self.pos)
            .copied()
            .filter(|c| c.is_ascii_alphabetic() && *c != b'e' && *c != b'E')
    }

    fn at_end(&mut self) -> bool {
        self.skip_sep();
        self.pos >= self.s.len()
    }

    fn number(&mut self) -> Option<f64> {
        self.skip_sep();
        let start = self.pos;
        let s = self.s;
        let mut i = self.pos;
        if i < s.len() && (s[i] == b'+' || s[i] == b'-') {
            i += 1;
        }
        let mut seen_dot = false;
        let mut digits = 0;
        while i < s.len() && (s[i].is_ascii_digit() || (s[i] == b'.' && !seen_dot)) {
            seen_dot |= s[i] == b'.';
            digits += usize::from(s[i].is_ascii_digit());
            i += 1;
        }
        if digits == 0 {
            return None;
        }
        if i < s.len() && (s[i] == b'e' || s[i] == b'E') {
            let mut j = i + 1;
            if j < s.len() && (s[j] == b'+' || s[j] == b'-') {
                j += 1;
            }
            if j < s.len() && s[j].is_ascii_digit() {
                while j < s.len() && s[j].is_ascii_digit() {
                    j += 1;
                }
                i = j;
            }
        }
        self.pos = i;
        std::str::from_utf8(&s[start..i]).ok()?.parse().ok()
    }

    fn flag(&mut self) -> Option<bool> {
        self.skip_sep();
        let c = *self.s.get(self.pos)?;
        self.pos += 1;
        match c {
            b'0' => Some(false),
            b'1' => Some(true),
            _ => None,
        }
    }
}

fn bad(d: &str) -> VecdrawError {
    VecdrawError::UnsupportedValue {
        element: "path".into(),
        attr: "d".into(),
        value: d.into(),
    }
}

pub(super) fn parse_d(d: &str) -> Result<(Point, Vec<Segment>)> {
    let mut lx = Lexer {
        s: d.as_bytes(),
        pos: 0,
    };
    let mut cmd = match lx.peek_command() {
        Some(c @ (b'M' | b'm')) => {
            lx.pos += 1;
            c
        }
        _ => return Err(bad(d)),
    };
    let x = lx.number().ok_or_else(|| bad(d))?;
    let y = lx.number().ok_or_else(|| bad(d))?;
    let start = Point::new(x, y);
    let mut cur = start;
    // Extra coordinate pairs after M are implicit lineto commands.
    cmd = if cmd == b'M' { b'L' } else { b'l' };
    let mut segments = Vec::new();
    loop {
        if lx.at_end() {
            break;
        }
        if let Some(c) = lx.peek_command() {
            lx.pos += 1;
            cmd = c;
        }
        let rel = cmd.is_ascii_lowercase();
        let origin = if rel { cur } else { Point::new(0.0, 0.0) };
        match cmd.to_ascii_uppercase() {
            b'L' => {
                let x = lx.number().ok_or_else(|| bad(d))?;
                let y = lx.number().ok_or_else(|| bad(d))?;
                cur = Point::new(origin.x + x, origin.y + y);
                segments.push(Segment::Line { to: cur });
            }
            b'A' => {
                let rx = lx.number().ok_or_else(|| bad(d))?;
                let ry = lx.number().ok_or_else(|| bad(d))?;
                let _rotation = lx.number().ok_or_else(|| bad(d))?;
                let large_arc = lx.flag().ok_or_else(|| bad(d))?;
                let sweep = lx.flag().ok_or_else(|| bad(d))?;
                let x = lx.number().ok_or_else(|| bad(d))?;
                let y = lx.number().ok_or_else(|| bad(d))?;
                if (rx - ry).abs() > 1e-9 * rx.abs().max(ry.abs()) {
                    return Err(VecdrawError::UnsupportedValue {
                        element: "path".into(),
                        attr: "d (elliptical arc)".into(),
                        value: d.into(),
                    });
                }
                if !(rx > 0.0) {
                    return Err(VecdrawError::InvalidGeometry {
                        element: "path".into(),
                        reason: format!("arc radius {rx} must be positive"),
                    });
                }
                cur = Point::new(origin.x + x, origin.y + y);
                segments.push(Segment::Arc {
                    radius: rx,
                    large_arc,
                    sweep,
                    to: cur,
                });
            }
            _ => return Err(bad(d)),
        }
    }
    if segments.is_empty() {
        return Err(VecdrawError::InvalidGeometry {
            element: "path".into(),
            reason: "path has no segments".into(),
        });
    }
    Ok((start, segments))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lines_and_arcs() {
        let (s, segs) = parse_d("M 1,2 L 3 4 A 5 5 0 0 1 10 4 l-1-1").unwrap();
        assert_eq!(s, Point::new(1.0, 2.0));
        assert_eq!(segs.len(), 3);
        assert_eq!(
            segs[1],
            Segment::Arc {
                radius: 5.0,
                large_arc: false,
                sweep: true,
                to: Point::new(10.0, 4.0)
            }
        );
        assert_eq!(segs[2].end(), Point::new(9.0, 3.0));
    }

    #[test]
    fn implicit_lineto_and_compact_flags() {
        let (_, segs) = parse_d("m0 0 10 0a5 5 0 1110 0").unwrap();
        assert_eq!(segs[0].end(), Point::new(10.0, 0.0));
        assert_eq!(
            segs[1],
            Segment::Arc {
                radius: 5.0,
                large_arc: true,
                sweep: true,
                to: Point::new(20.0, 0.0)
            }
        );
    }

    #[test]
    fn rejects_unsupported_commands() {
        assert!(parse_d("M0 0 C 1 1 2 2 3 3").is_err());
        assert!(parse_d("M0 0 L1 1 Z").is_err());
        assert!(parse_d("M0 0 A 2 3 0 0 1 4 0").is_err());
        assert!(parse_d("L1 1").is_err());
        assert!(parse_d("M0 0").is_err());
    }
}

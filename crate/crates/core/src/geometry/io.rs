//! Point-cloud files.
//!
//! Text: one point per line, `x y z` or `x y z label`, whitespace separated.
//! Blank lines and lines starting with `#` are ignored.
//!
//! Binary (`PCB1`): the 4 magic bytes `PCB1`, a little-endian `u32` point
//! count, then `count` triples of little-endian `f32`.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::cloud::{Point3, PointCloud};
use crate::error::{Error, Result};

pub const PCB1_MAGIC: &[u8; 4] = b"PCB1";

pub fn parse_text(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 && fields.len() != 4 {
            return Err(Error::Format(format!(
                "line {}: expected 3 or 4 fields, found {}",
                lineno + 1,
                fields.len()
            )));
        }
        let mut p = [0.0; 3];
        for k in 0..3 {
            p[k] = fields[k]
                .parse()
                .map_err(|_| Error::Format(format!("line {}: bad coordinate {:?}", lineno + 1, fields[k])))?;
        }
        points.push(p);
        if let Some(l) = fields.get(3) {
            labels.push(
                l.parse()
                    .map_err(|_| Error::Format(format!("line {}: bad label {l:?}", lineno + 1)))?,
            );
        }
    }
    if !labels.is_empty() && labels.len() != points.len() {
        return Err(Error::Format("labels must be given for every point or none".into()));
    }
    let cloud = PointCloud::new(points)?;
    if labels.is_empty() {
        Ok(cloud)
    } else {
        cloud.with_point_labels(labels)
    }
}

/// Text rendering. `header` lines are written as `#` comments.
pub fn format_text(cloud: &PointCloud, header: &[String]) -> String {
    let mut out = String::new();
    for h in header {
        out.push_str("# ");
        out.push_str(h);
        out.push('\n');
    }
    for (i, p) in cloud.points().iter().enumerate() {
        match cloud.point_labels() {
            Some(l) => out.push_str(&format!("{} {} {} {}\n", p[0], p[1], p[2], l[i])),
            None => out.push_str(&format!("{} {} {}\n", p[0], p[1], p[2])),
        }
    }
    out
}

pub fn encode_pcb1(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + cloud.len() * 12);
    out.extend_from_slice(PCB1_MAGIC);
    out.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    for p in cloud.points() {
        for &c in p {
            out.extend_from_slice(&(c as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_pcb1(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() < 8 || &bytes[..4] != PCB1_MAGIC {
        return Err(Error::Format("missing PCB1 magic".into()));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = &bytes[8..];
    if body.len() != count * 12 {
        return Err(Error::Format(format!(
            "PCB1 declares {count} points but carries {} payload bytes",
            body.len()
        )));
    }
    let points: Vec<Point3> = body
        .chunks_exact(12)
        .map(|c| {
            let f = |o: usize| f32::from_le_bytes(c[o..o + 4].try_into().expect("4 bytes")) as f64;
            [f(0), f(4), f(8)]
        })
        .collect();
    PointCloud::new(points)
}

/// Read either format, sniffing the `PCB1` magic.
pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(PCB1_MAGIC) {
        decode_pcb1(&bytes)
    } else {
        let text =
            String::from_utf8(bytes).map_err(|_| Error::Format(format!("{} is not UTF-8 text", path.display())))?;
        parse_text(&text)
    }
}

pub fn write_text(path: &Path, cloud: &PointCloud, header: &[String]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(format_text(cloud, header).as_bytes())?;
    Ok(())
}

pub fn write_pcb1(path: &Path, cloud: &PointCloud) -> Result<()> {
    fs::write(path, encode_pcb1(cloud))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_with_labels_and_comments() {
        let c = parse_text("# hello\n0 0 0 1\n\n1.5 -2 3e-1 2\n").unwrap();
        assert_eq!(c.points(), &[[0.0, 0.0, 0.0], [1.5, -2.0, 0.3]]);
        assert_eq!(c.point_labels(), Some(&[1, 2][..]));
    }

    #[test]
    fn text_rejects_ragged_labels() {
        assert!(parse_text("0 0 0 1\n1 1 1\n").is_err());
        assert!(parse_text("0 0\n").is_err());
        assert!(parse_text("a b c\n").is_err());
    }

    #[test]
    fn pcb1_layout_is_exact() {
        let c = PointCloud::new(vec![[1.0, 2.0, 3.0]]).unwrap();
        let bytes = encode_pcb1(&c);
        assert_eq!(&bytes[..4], b"PCB1");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 20);
        assert_eq!(decode_pcb1(&bytes).unwrap(), c);
    }

    #[test]
    fn pcb1_truncation_is_detected() {
        let c = PointCloud::new(vec![[1.0, 2.0, 3.0]]).unwrap();
        let bytes = encode_pcb1(&c);
        assert!(decode_pcb1(&bytes[..15]).is_err());
        assert!(decode_pcb1(b"PCB2\0\0\0\0").is_err());
    }
}

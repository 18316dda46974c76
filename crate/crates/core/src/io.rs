//! Binary and CSV serialisation of fields and kernels.
//!
//! Binary layout (little-endian): `b"GPHF"`, a kind byte, `d`, `L`, `N` as `u32`,
//! a mean-zero byte, then `volume` doubles in storage order.

use std::io::{Read, Write};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lattice::{Field, Torus};

pub const MAGIC: &[u8; 4] = b"GPHF";

/// What a binary record holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    Field = 0,
    GffKernel = 1,
    FrdLayer = 2,
}

impl RecordKind {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Self::Field),
            1 => Ok(Self::GffKernel),
            2 => Ok(Self::FrdLayer),
            other => Err(Error::Format(format!("unknown record kind {other}"))),
        }
    }
}

pub fn write_binary<W: Write>(w: &mut W, kind: RecordKind, field: &Field) -> Result<()> {
    let t = field.torus;
    w.write_all(MAGIC)?;
    w.write_all(&[kind as u8])?;
    w.write_all(&(t.d() as u32).to_le_bytes())?;
    w.write_all(&(t.l() as u32).to_le_bytes())?;
    w.write_all(&t.n().to_le_bytes())?;
    w.write_all(&[field.mean_zero as u8])?;
    for v in &field.values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn to_binary(kind: RecordKind, field: &Field) -> Vec<u8> {
    let mut buf = Vec::with_capacity(18 + 8 * field.values.len());
    write_binary(&mut buf, kind, field).expect("writing to a Vec cannot fail");
    buf
}

pub fn read_binary<R: Read>(r: &mut R) -> Result<(RecordKind, Field)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let mut b1 = [0u8; 1];
    r.read_exact(&mut b1)?;
    let kind = RecordKind::from_byte(b1[0])?;
    let mut u = [0u8; 4];
    let mut next_u32 = |r: &mut R| -> Result<u32> {
        r.read_exact(&mut u)?;
        Ok(u32::from_le_bytes(u))
    };
    let d = next_u32(r)? as usize;
    let l = next_u32(r)? as usize;
    let n = next_u32(r)?;
    r.read_exact(&mut b1)?;
    let mean_zero = b1[0] != 0;
    let torus = Torus::new(d, l, n)?;
    let mut values = Vec::with_capacity(torus.volume());
    let mut b8 = [0u8; 8];
    for _ in 0..torus.volume() {
        r.read_exact(&mut b8)?;
        values.push(f64::from_le_bytes(b8));
    }
    let mut f = Field::new(torus, values)?;
    f.mean_zero = mean_zero;
    Ok((kind, f))
}

/// One CSV row per point: canonical coordinates, then the value.
pub fn write_csv<W: Write>(w: &mut W, field: &Field) -> Result<()> {
    let t = field.torus;
    let header: Vec<String> = (1..=t.d()).map(|i| format!("x{i}")).collect();
    writeln!(w, "{},value", header.join(","))?;
    let mut c = vec![0i64; t.d()];
    for (idx, v) in field.values.iter().enumerate() {
        t.coords_into(idx, &mut c);
        let coords: Vec<String> = c.iter().map(|x| x.to_string()).collect();
        writeln!(w, "{},{:.17e}", coords.join(","), v)?;
    }
    Ok(())
}

pub fn read_csv<R: Read>(r: &mut R, torus: Torus) -> Result<Field> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    let mut values = vec![f64::NAN; torus.volume()];
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != torus.d() + 1 {
            return Err(Error::Format(format!(
                "line {}: expected {} columns",
                lineno + 1,
                torus.d() + 1
            )));
        }
        let coords = parts[..torus.d()]
            .iter()
            .map(|s| s.trim().parse::<i64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
        let v: f64 = parts[torus.d()]
            .trim()
            .parse()
            .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
        values[torus.index_of(&coords)] = v;
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Format("CSV does not cover every point".into()));
    }
    Field::new(torus, values)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::make_torus;

    #[test]
    fn binary_round_trip() {
        let t = make_torus(2, 3, 2).unwrap();
        let f = Field::from_fn(t, |p| p.0[0] as f64 * 0.5 - p.0[1] as f64).project_mean_zero();
        let bytes = to_binary(RecordKind::GffKernel, &f);
        let (kind, g) = read_binary(&mut bytes.as_slice()).unwrap();
        assert_eq!(kind, RecordKind::GffKernel);
        assert_eq!(g, f);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_binary(&mut bad.as_slice()).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let t = make_torus(3, 3, 1).unwrap();
        let f = Field::from_fn(t, |p| (p.0[0] * 9 + p.0[1] * 3 + p.0[2]) as f64 / 7.0);
        let mut buf = Vec::new();
        write_csv(&mut buf, &f).unwrap();
        let g = read_csv(&mut buf.as_slice(), t).unwrap();
        assert_eq!(g.values, f.values);
    }
}

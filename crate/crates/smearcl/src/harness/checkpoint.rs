//! Versioned binary model checkpoints. The write/read round trip is exact:
//! parameters are stored as little-endian f64 bit patterns.

use std::io::{Read, Write};
use std::path::Path;

use crate::core::CellClass;
use crate::detector::{Architecture, DetectorModel};
use crate::error::{Error, Result};
use crate::strategies::AnchorEntry;

const MODEL_MAGIC: &[u8; 4] = b"SMCK";
const ANCHOR_MAGIC: &[u8; 4] = b"SMAN";
const VERSION: u32 = 1;

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64s(w: &mut impl Write, vs: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(vs.len() * 8);
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn save_model(path: &Path, model: &DetectorModel) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MODEL_MAGIC)?;
    write_u32(&mut w, VERSION)?;
    write_u32(&mut w, model.arch.input_size as u32)?;
    write_u32(&mut w, model.arch.channels.len() as u32)?;
    for &c in &model.arch.channels {
        write_u32(&mut w, c as u32)?;
    }
    w.write_all(&[model.target.label_id()])?;
    write_u64(&mut w, model.init_seed)?;
    write_u64(&mut w, model.params.len() as u64)?;
    write_f64s(&mut w, &model.params)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<DetectorModel> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic {magic:?}",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let input_size = read_u32(&mut r)? as usize;
    let n_layers = read_u32(&mut r)? as usize;
    if n_layers == 0 || n_layers > 16 {
        return Err(Error::Checkpoint(format!(
            "{}: implausible layer count {n_layers}",
            path.display()
        )));
    }
    let mut channels = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        channels.push(read_u32(&mut r)? as usize);
    }
    let mut cls = [0u8; 1];
    r.read_exact(&mut cls)?;
    let target = CellClass::from_label_id(cls[0])?;
    let init_seed = read_u64(&mut r)?;
    let n_params = read_u64(&mut r)? as usize;
    let arch = Architecture {
        input_size,
        channels,
    };
    if n_params != arch.param_count() {
        return Err(Error::Checkpoint(format!(
            "{}: parameter count {n_params} does not match architecture ({})",
            path.display(),
            arch.param_count()
        )));
    }
    let params = read_f64s(&mut r, n_params)?;
    Ok(DetectorModel {
        arch,
        target,
        params,
        init_seed,
    })
}

pub fn save_anchor(path: &Path, anchor: &AnchorEntry) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(ANCHOR_MAGIC)?;
    write_u32(&mut w, VERSION)?;
    write_u64(&mut w, anchor.theta_star.len() as u64)?;
    write_f64s(&mut w, &anchor.theta_star)?;
    write_f64s(&mut w, &anchor.fisher)?;
    w.flush()?;
    Ok(())
}

pub fn load_anchor(path: &Path) -> Result<AnchorEntry> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != ANCHOR_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic {magic:?}",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let n = read_u64(&mut r)? as usize;
    let theta_star = read_f64s(&mut r, n)?;
    let fisher = read_f64s(&mut r, n)?;
    Ok(AnchorEntry { theta_star, fisher })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = DetectorModel::build_reference(CellClass::Infected, 77);
        // exercise awkward bit patterns
        model.params[0] = f64::MIN_POSITIVE;
        model.params[1] = -0.0;
        model.params[2] = 1.0 + f64::EPSILON;
        let path = dir.path().join("m.ckpt");
        save_model(&path, &model).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.target, model.target);
        assert_eq!(loaded.init_seed, model.init_seed);
        assert_eq!(loaded.arch, model.arch);
        let same_bits = loaded
            .params
            .iter()
            .zip(&model.params)
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same_bits);
    }

    #[test]
    fn anchor_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let anchor = AnchorEntry {
            theta_star: vec![0.1, -2.5, 3e-300],
            fisher: vec![0.0, 1.25, 9.75],
        };
        let path = dir.path().join("a.anchor");
        save_anchor(&path, &anchor).unwrap();
        let loaded = load_anchor(&path).unwrap();
        assert_eq!(loaded, anchor);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.ckpt");
        std::fs::write(&path, b"NOPEnope").unwrap();
        assert!(matches!(load_model(&path), Err(Error::Checkpoint(_))));
    }
}

//! PSDW weights file format.
//!
//! Layout, all little-endian: magic `PSDW`, u32 version (1), u32
//! conditioning tag (0 = cross-attention, 1 = concat), u32 base channel
//! count, u32 training timestep count, f32 beta_min, f32 beta_max,
//! f32 s_scale, f32 kappa, u32 parameter count, then the f32 parameters in
//! the network's documented flat order. Parameters are stored exactly as
//! trained, so a write/read cycle is bit-identical.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use petsr_core::diffusion::TransformParams;
use petsr_core::net::{ArchDescriptor, CondMode};
use petsr_core::train::TinyDenoiserWeights;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"PSDW";
pub const VERSION: u32 = 1;

pub fn write_weights(path: &Path, w: &TinyDenoiserWeights) -> Result<()> {
    let mut out = Vec::with_capacity(40 + 4 * w.params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&w.arch.cond_mode.tag().to_le_bytes());
    out.extend_from_slice(&(w.arch.base_channels as u32).to_le_bytes());
    out.extend_from_slice(&(w.t_train as u32).to_le_bytes());
    out.extend_from_slice(&(w.beta_min as f32).to_le_bytes());
    out.extend_from_slice(&(w.beta_max as f32).to_le_bytes());
    out.extend_from_slice(&(w.transform.s_scale as f32).to_le_bytes());
    out.extend_from_slice(&(w.transform.kappa as f32).to_le_bytes());
    out.extend_from_slice(&(w.params.len() as u32).to_le_bytes());
    for &p in &w.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(&out).map_err(|e| CliError::io(path, e))?;
    Ok(())
}

pub fn read_weights(path: &Path) -> Result<TinyDenoiserWeights> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let fail = |msg: &str| CliError::format(path, msg);
    if bytes.len() < 40 {
        return Err(fail("file shorter than the PSDW header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fail("bad magic, not a PSDW file"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let real = |i: usize| f32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    if word(4) != VERSION {
        return Err(fail(&format!("unsupported version {}", word(4))));
    }
    let cond_mode = CondMode::from_tag(word(8)).map_err(|e| fail(&e.to_string()))?;
    let base_channels = word(12) as usize;
    let t_train = word(16) as usize;
    let beta_min = real(20) as f64;
    let beta_max = real(24) as f64;
    let s_scale = real(28) as f64;
    let kappa = real(32) as f64;
    let count = word(36) as usize;
    if bytes.len() != 40 + 4 * count {
        return Err(fail(&format!(
            "payload length {} does not match parameter count {count}",
            bytes.len()
        )));
    }
    let params: Vec<f32> = bytes[40..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let arch = ArchDescriptor { cond_mode, base_channels };
    if arch.param_count() != count {
        return Err(fail(&format!(
            "parameter count {count} does not match the architecture ({} expected)",
            arch.param_count()
        )));
    }
    Ok(TinyDenoiserWeights {
        arch,
        params,
        transform: TransformParams { s_scale, kappa },
        t_train,
        beta_min,
        beta_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use petsr_core::net::TinyNet;
    use tempfile::tempdir;

    #[test]
    fn weights_roundtrip_bit_exact() {
        let arch = ArchDescriptor { cond_mode: CondMode::CrossAttention, base_channels: 4 };
        let net = TinyNet::<f32>::init(arch, 77);
        let w = TinyDenoiserWeights {
            arch,
            params: net.params.clone(),
            transform: TransformParams { s_scale: 1.0, kappa: 2.5 },
            t_train: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
        };
        let dir = tempdir().unwrap();
        let path = dir.path().join("w.psdw");
        write_weights(&path, &w).unwrap();
        let back = read_weights(&path).unwrap();
        assert_eq!(back.arch, w.arch);
        // Bit-exact parameter roundtrip.
        for (a, b) in back.params.iter().zip(&w.params) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back.t_train, 1000);
        assert_eq!(back.transform.kappa as f32, 2.5);
        // Second write produces identical bytes.
        let path2 = dir.path().join("w2.psdw");
        write_weights(&path2, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn rejects_mismatched_arch() {
        let arch = ArchDescriptor { cond_mode: CondMode::Concat, base_channels: 4 };
        let w = TinyDenoiserWeights {
            arch,
            params: vec![0.0; 10], // wrong count
            transform: TransformParams::default(),
            t_train: 10,
            beta_min: 1e-4,
            beta_max: 0.02,
        };
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.psdw");
        write_weights(&path, &w).unwrap();
        assert!(read_weights(&path).is_err());
    }
}

//! Model persistence: a JSON manifest at the given path plus a flat
//! little-endian f32 array at `<path>.bin`. The manifest records everything
//! needed to rebuild the model shape and a SHA-256 of the array.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{DiffusionConfig, DiffusionModel};
use crate::error::{Error, Result};
use crate::iql::{IqlConfig, QFunction, QRepresentation};

const FORMAT: &str = "ihid-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Iql {
        n_nodes: usize,
        representation: QRepresentation,
        embed_dim: usize,
        hidden: usize,
    },
    Diffusion {
        config: DiffusionConfig,
        /// Denormalized copies of the fields readers most often need.
        steps: usize,
        beta_1: f64,
        beta_t: f64,
        rho: f64,
        t_inf: usize,
        len: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub model: ModelSpec,
    pub n_params: usize,
    /// File name of the parameter array, relative to the manifest.
    pub params_file: String,
    pub sha256: String,
}

pub fn params_path(manifest: &Path) -> PathBuf {
    let mut s = manifest.as_os_str().to_owned();
    s.push(".bin");
    PathBuf::from(s)
}

fn digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write(path: &Path, model: ModelSpec, params: &[f32]) -> Result<Manifest> {
    let bytes: Vec<u8> = params.iter().flat_map(|v| v.to_le_bytes()).collect();
    let bin = params_path(path);
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        model,
        n_params: params.len(),
        params_file: bin.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        sha256: digest(&bytes),
    };
    std::fs::write(&bin, &bytes).map_err(|e| Error::io(&bin, e))?;
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

fn read(path: &Path) -> Result<(Manifest, Vec<f32>)> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&s).map_err(|e| Error::Checkpoint(format!("{}: bad manifest: {e}", path.display())))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported format {} v{}",
            path.display(),
            manifest.format,
            manifest.version
        )));
    }
    let bin = path.with_file_name(&manifest.params_file);
    let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if bytes.len() != 4 * manifest.n_params {
        return Err(Error::Checkpoint(format!(
            "{}: expected {} bytes, found {}",
            bin.display(),
            4 * manifest.n_params,
            bytes.len()
        )));
    }
    if digest(&bytes) != manifest.sha256 {
        return Err(Error::Checkpoint(format!("{}: checksum mismatch", bin.display())));
    }
    let params = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok((manifest, params))
}

/// Q parameters are stored as f32; training already rounds them, so a
/// save/load roundtrip is exact.
pub fn save_q(q: &QFunction, path: impl AsRef<Path>) -> Result<Manifest> {
    let (embed_dim, hidden) = q.mlp_dims().unwrap_or((0, 0));
    let params: Vec<f32> = q.param_values().iter().flat_map(|a| a.iter().map(|&v| v as f32)).collect();
    let spec = ModelSpec::Iql {
        n_nodes: q.n_nodes(),
        representation: q.representation(),
        embed_dim,
        hidden,
    };
    write(path.as_ref(), spec, &params)
}

pub fn load_q(path: impl AsRef<Path>) -> Result<QFunction> {
    let path = path.as_ref();
    let (manifest, params) = read(path)?;
    let ModelSpec::Iql {
        n_nodes,
        representation,
        embed_dim,
        hidden,
    } = manifest.model
    else {
        return Err(Error::Checkpoint(format!("{} is not a Q checkpoint", path.display())));
    };
    let cfg = IqlConfig {
        representation,
        embed_dim,
        hidden,
        ..IqlConfig::default()
    };
    let mut q = QFunction::new(n_nodes, &cfg);
    let mut blocks = q.param_values_mut();
    let expected: usize = blocks.iter().map(|b| b.len()).sum();
    if expected != params.len() {
        return Err(Error::Checkpoint(format!("expected {expected} Q parameters, found {}", params.len())));
    }
    let mut it = params.into_iter();
    for b in &mut blocks {
        for (dst, src) in b.iter_mut().zip(&mut it) {
            *dst = src as f64;
        }
    }
    q.refresh();
    Ok(q)
}

pub fn save_diffusion(dm: &DiffusionModel, path: impl AsRef<Path>) -> Result<Manifest> {
    let c = &dm.cfg;
    let spec = ModelSpec::Diffusion {
        config: c.clone(),
        steps: c.steps,
        beta_1: c.beta_1,
        beta_t: c.beta_t,
        rho: c.rho,
        t_inf: c.t_inf,
        len: c.len,
        seed: c.seed,
    };
    write(path.as_ref(), spec, &dm.param_vector())
}

pub fn load_diffusion(path: impl AsRef<Path>) -> Result<DiffusionModel> {
    let path = path.as_ref();
    let (manifest, params) = read(path)?;
    let ModelSpec::Diffusion { config, .. } = manifest.model else {
        return Err(Error::Checkpoint(format!("{} is not a diffusion checkpoint", path.display())));
    };
    let mut dm = DiffusionModel::new(config)?;
    dm.load_param_vector(&params)?;
    Ok(dm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn tiny_diffusion() -> DiffusionModel {
        DiffusionModel::new(DiffusionConfig {
            len: 8,
            latent: 8,
            layers: 1,
            heads: 2,
            steps: 20,
            t_inf: 5,
            seed: 3,
            ..DiffusionConfig::synthetic()
        })
        .unwrap()
    }

    #[test]
    fn q_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.ckpt");
        let table = Array2::from_shape_fn((4, 4), |(i, j)| ((i * 4 + j) as f32 * 0.37 - 2.0) as f64);
        let q = QFunction::from_table(table);
        save_q(&q, &p).unwrap();
        assert!(params_path(&p).exists());
        assert_eq!(load_q(&p).unwrap(), q);
    }

    #[test]
    fn mlp_q_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.ckpt");
        let mut q = QFunction::mlp(5, 4, 6, 1);
        for b in q.param_values_mut() {
            b.mapv_inplace(|v| v as f32 as f64);
        }
        q.refresh();
        save_q(&q, &p).unwrap();
        assert_eq!(load_q(&p).unwrap().table(), q.table());
    }

    #[test]
    fn diffusion_roundtrip_and_manifest_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.ckpt");
        let dm = tiny_diffusion();
        let m = save_diffusion(&dm, &p).unwrap();
        assert_eq!(m.n_params, dm.n_params());
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        for k in ["steps", "beta_1", "beta_t", "rho", "t_inf", "len", "seed"] {
            assert!(v["model"].get(k).is_some(), "manifest lacks {k}");
        }
        assert_eq!(std::fs::metadata(params_path(&p)).unwrap().len(), 4 * dm.n_params() as u64);
        let back = load_diffusion(&p).unwrap();
        assert_eq!(back.param_vector(), dm.param_vector());
        assert_eq!(back.cfg, dm.cfg);
    }

    #[test]
    fn corrupted_or_mismatched_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.ckpt");
        save_diffusion(&tiny_diffusion(), &p).unwrap();
        assert!(matches!(load_q(&p), Err(Error::Checkpoint(_))));
        let bin = params_path(&p);
        let mut bytes = std::fs::read(&bin).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(&bin, &bytes).unwrap();
        assert!(matches!(load_diffusion(&p), Err(Error::Checkpoint(_))));
        std::fs::write(&bin, &bytes[..8]).unwrap();
        assert!(matches!(load_diffusion(&p), Err(Error::Checkpoint(_))));
        assert!(matches!(load_diffusion(dir.path().join("missing")), Err(Error::Io { .. })));
    }
}

//! Trained model bundle and its on-disk format.
//!
//! The weights go to a little-endian binary file; the configuration needed to
//! reuse them (repertoire, window, front-end, optimizer, history) goes to a
//! JSON sidecar next to it, `<checkpoint>.json`.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::WindowConfig;
use crate::dataset::Repertoire;
use crate::error::{Error, Result};
use crate::features::FrontEndConfig;
use crate::nnet::{init_backend, BackendConfig, ModelParams};
use crate::optim::{History, NAdamConfig};

const MAGIC: &[u8; 8] = b"VSEGCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub repertoire: Repertoire,
    pub window: WindowConfig,
    pub frontend: FrontEndConfig,
    pub backend: BackendConfig,
    pub optimizer: NAdamConfig,
    pub history: History,
}

/// Everything needed to run inference on new recordings.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub params: ModelParams,
    pub repertoire: Repertoire,
    pub window: WindowConfig,
    pub frontend: FrontEndConfig,
    pub optimizer: NAdamConfig,
    pub history: History,
}

pub fn metadata_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32(r: &mut impl Read) -> Result<f32> {
    Ok(f32::from_bits(read_u32(r)?))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
    Ok(f64::from_le_bytes(b))
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} too large")))
}

impl Model {
    /// Checks that the pieces agree with each other.
    pub fn validate(&self) -> Result<()> {
        let cfg = &self.params.config;
        if cfg.n_classes != self.repertoire.len() {
            return Err(Error::Checkpoint(format!(
                "{} output classes for a repertoire of {}",
                cfg.n_classes,
                self.repertoire.len()
            )));
        }
        if cfg.input_dim != self.frontend.dim() {
            return Err(Error::FrontEndMismatch(format!(
                "back-end expects {} inputs, front-end produces {}",
                cfg.input_dim,
                self.frontend.dim()
            )));
        }
        if self.window.target_rate != self.frontend.sample_rate {
            return Err(Error::FrontEndMismatch(format!(
                "window rate {} Hz, front-end rate {} Hz",
                self.window.target_rate, self.frontend.sample_rate
            )));
        }
        Ok(())
    }

    pub fn meta(&self) -> ModelMeta {
        ModelMeta {
            repertoire: self.repertoire.clone(),
            window: self.window,
            frontend: self.frontend.clone(),
            backend: self.params.config,
            optimizer: self.optimizer,
            history: self.history.clone(),
        }
    }

    /// Writes the weights to `path` and the metadata to `<path>.json`.
    ///
    /// Weights are stored as f32; the output is a pure function of the model.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let cfg = &self.params.config;
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        write_u32(&mut w, VERSION)?;
        for v in [
            cfg.input_dim,
            cfg.n_classes,
            cfg.det_layers,
            cfg.det_nodes,
            cfg.cls_layers,
            cfg.cls_nodes,
        ] {
            write_u32(&mut w, to_u32(v, "dimension")?)?;
        }
        w.write_all(&cfg.dropout.to_le_bytes())?;
        w.write_all(&cfg.max_norm.to_le_bytes())?;
        let tensors = self.params.all_tensors();
        write_u32(&mut w, to_u32(tensors.len(), "tensor count")?)?;
        for t in tensors {
            write_u32(&mut w, to_u32(t.len(), "tensor")?)?;
            for &v in t {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        w.flush()?;

        let mut m = BufWriter::new(std::fs::File::create(metadata_path(path))?);
        serde_json::to_writer_pretty(&mut m, &self.meta())?;
        writeln!(m)?;
        m.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let meta_file = std::fs::File::open(metadata_path(path)).map_err(|e| {
            Error::Checkpoint(format!("{}: {e}", metadata_path(path).display()))
        })?;
        let meta: ModelMeta = serde_json::from_reader(BufReader::new(meta_file))?;

        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("file too short".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = read_u32(&mut r)? as usize;
        }
        let dropout = read_f64(&mut r)?;
        let max_norm = read_f64(&mut r)?;
        let cfg = BackendConfig {
            input_dim: dims[0],
            n_classes: dims[1],
            det_layers: dims[2],
            det_nodes: dims[3],
            cls_layers: dims[4],
            cls_nodes: dims[5],
            dropout,
            max_norm,
        };
        cfg.validate()?;
        if (cfg.input_dim, cfg.n_classes) != (meta.backend.input_dim, meta.backend.n_classes) {
            return Err(Error::Checkpoint("weights and metadata disagree".into()));
        }
        let mut params = init_backend(&cfg, 0)?;
        let count = read_u32(&mut r)? as usize;
        let mut tensors = params.all_tensors_mut();
        if count != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {count}",
                tensors.len()
            )));
        }
        for t in tensors.iter_mut() {
            let len = read_u32(&mut r)? as usize;
            if len != t.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor of {len} values where {} expected",
                    t.len()
                )));
            }
            for v in t.iter_mut() {
                *v = f64::from(read_f32(&mut r)?);
            }
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        let model = Model {
            params,
            repertoire: meta.repertoire,
            window: meta.window,
            frontend: meta.frontend,
            optimizer: meta.optimizer,
            history: meta.history,
        };
        model.validate()?;
        Ok(model)
    }

    /// Rounds every parameter to f32, as a save/load cycle would.
    pub fn quantized(mut self) -> Self {
        for t in self.params.all_tensors_mut() {
            for v in t.iter_mut() {
                *v = f64::from(*v as f32);
            }
        }
        self
    }
}

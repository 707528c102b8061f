//! Binary weight container shared by target and draft checkpoints.
//!
//! ```text
//! magic   b"MMSPECW1"
//! kind    u8             0 = target, 1 = draft
//! header  u32 len + JSON config
//! count   u32
//! tensor  u16 name len, name, u32 rows, u32 cols, rows·cols f64
//! ```
//!
//! Integers and floats are little-endian. Gains are stored as `1 × d`.

use std::io::{Read, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::draft::{DraftConfig, DraftModel};
use crate::error::{Error, Result};
use crate::layers::Block;
use crate::numerics::Matrix;
use crate::target::{TargetConfig, TargetModel};

const MAGIC: &[u8; 8] = b"MMSPECW1";
const KIND_TARGET: u8 = 0;
const KIND_DRAFT: u8 = 1;

struct Tensor {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

fn write_all<W: Write, C: Serialize>(w: &mut W, kind: u8, cfg: &C, tensors: &[Tensor]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[kind])?;
    let header = serde_json::to_vec(cfg)?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        let name = t.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(t.rows as u32).to_le_bytes())?;
        w.write_all(&(t.cols as u32).to_le_bytes())?;
        for v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_all<R: Read, C: DeserializeOwned>(r: &mut R, kind: u8) -> Result<(C, Vec<Tensor>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let mut k = [0u8; 1];
    r.read_exact(&mut k)?;
    if k[0] != kind {
        return Err(Error::Format(format!("expected kind {kind}, found {}", k[0])));
    }
    let mut header = vec![0u8; read_u32(r)? as usize];
    r.read_exact(&mut header)?;
    let cfg = serde_json::from_slice(&header)?;
    let count = read_u32(r)? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let mut nl = [0u8; 2];
        r.read_exact(&mut nl)?;
        let mut name = vec![0u8; u16::from_le_bytes(nl) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let rows = read_u32(r)? as usize;
        let cols = read_u32(r)? as usize;
        let mut data = Vec::with_capacity((rows * cols).min(1 << 24));
        let mut b = [0u8; 8];
        for _ in 0..rows * cols {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        tensors.push(Tensor {
            name,
            rows,
            cols,
            data,
        });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes".into()));
    }
    Ok((cfg, tensors))
}

fn matrix(name: &str, m: &Matrix) -> Tensor {
    Tensor {
        name: name.into(),
        rows: m.rows(),
        cols: m.cols(),
        data: m.data().to_vec(),
    }
}

fn gain(name: &str, g: &[f64]) -> Tensor {
    Tensor {
        name: name.into(),
        rows: 1,
        cols: g.len(),
        data: g.to_vec(),
    }
}

fn block_tensors(prefix: &str, b: &Block) -> Vec<Tensor> {
    vec![
        gain(&format!("{prefix}.norm1"), &b.norm1),
        matrix(&format!("{prefix}.wq"), &b.wq),
        matrix(&format!("{prefix}.wk"), &b.wk),
        matrix(&format!("{prefix}.wv"), &b.wv),
        matrix(&format!("{prefix}.wo"), &b.wo),
        gain(&format!("{prefix}.norm2"), &b.norm2),
        matrix(&format!("{prefix}.w1"), &b.w1),
        matrix(&format!("{prefix}.w2"), &b.w2),
    ]
}

/// Pops tensors in write order, checking names.
struct Reader {
    tensors: std::vec::IntoIter<Tensor>,
}

impl Reader {
    fn next(&mut self, name: &str) -> Result<Tensor> {
        let t = self
            .tensors
            .next()
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        if t.name != name {
            return Err(Error::Format(format!("expected {name}, found {}", t.name)));
        }
        Ok(t)
    }

    fn matrix(&mut self, name: &str) -> Result<Matrix> {
        let t = self.next(name)?;
        Matrix::new(t.rows, t.cols, t.data)
    }

    fn gain(&mut self, name: &str) -> Result<Vec<f64>> {
        let t = self.next(name)?;
        if t.rows != 1 {
            return Err(Error::Format(format!("{name} must be 1 × d")));
        }
        Ok(t.data)
    }

    fn block(&mut self, prefix: &str, n_heads: usize) -> Result<Block> {
        Ok(Block {
            n_heads,
            norm1: self.gain(&format!("{prefix}.norm1"))?,
            wq: self.matrix(&format!("{prefix}.wq"))?,
            wk: self.matrix(&format!("{prefix}.wk"))?,
            wv: self.matrix(&format!("{prefix}.wv"))?,
            wo: self.matrix(&format!("{prefix}.wo"))?,
            norm2: self.gain(&format!("{prefix}.norm2"))?,
            w1: self.matrix(&format!("{prefix}.w1"))?,
            w2: self.matrix(&format!("{prefix}.w2"))?,
        })
    }

    fn finish(mut self) -> Result<()> {
        match self.tensors.next() {
            Some(t) => Err(Error::Format(format!("unexpected tensor {}", t.name))),
            None => Ok(()),
        }
    }
}

pub fn write_target<W: Write>(w: &mut W, model: &TargetModel) -> Result<()> {
    let mut tensors = vec![
        matrix("patch_proj", model.patch_projection()),
        matrix("embed", model.embedding()),
    ];
    for (i, b) in model.blocks().iter().enumerate() {
        tensors.extend(block_tensors(&format!("block{i}"), b));
    }
    tensors.push(gain("final_norm", model.final_norm()));
    tensors.push(matrix("unembed", model.unembedding()));
    write_all(w, KIND_TARGET, model.config(), &tensors)
}

pub fn read_target<R: Read>(r: &mut R) -> Result<TargetModel> {
    let (cfg, tensors): (TargetConfig, _) = read_all(r, KIND_TARGET)?;
    let mut rd = Reader {
        tensors: tensors.into_iter(),
    };
    let patch_proj = rd.matrix("patch_proj")?;
    let embed = rd.matrix("embed")?;
    let blocks = (0..cfg.n_layers)
        .map(|i| rd.block(&format!("block{i}"), cfg.n_heads))
        .collect::<Result<Vec<_>>>()?;
    let final_norm = rd.gain("final_norm")?;
    let unembed = rd.matrix("unembed")?;
    rd.finish()?;
    TargetModel::from_parts(cfg, patch_proj, embed, blocks, final_norm, unembed)
}

pub fn write_draft<W: Write>(w: &mut W, model: &DraftModel) -> Result<()> {
    let p = model.params();
    let mut tensors = vec![
        matrix("queries", &p.queries),
        matrix("fuse_w", &p.fuse_w),
        gain("fuse_b", &p.fuse_b),
        matrix("placeholders", &p.placeholders),
    ];
    for (i, b) in p.blocks.iter().enumerate() {
        tensors.extend(block_tensors(&format!("block{i}"), b));
    }
    write_all(w, KIND_DRAFT, model.config(), &tensors)
}

/// Reads a draft and checks it against the target it will run on.
pub fn read_draft<R: Read>(r: &mut R, target: &TargetModel) -> Result<DraftModel> {
    let (cfg, tensors): (DraftConfig, _) = read_all(r, KIND_DRAFT)?;
    let mut rd = Reader {
        tensors: tensors.into_iter(),
    };
    let params = crate::draft::DraftParams {
        queries: rd.matrix("queries")?,
        fuse_w: rd.matrix("fuse_w")?,
        fuse_b: rd.gain("fuse_b")?,
        placeholders: rd.matrix("placeholders")?,
        blocks: (0..cfg.n_layers)
            .map(|i| rd.block(&format!("block{i}"), cfg.n_heads))
            .collect::<Result<Vec<_>>>()?,
    };
    rd.finish()?;
    DraftModel::from_params(cfg, params, target)
}

pub fn save_target(path: &std::path::Path, model: &TargetModel) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_target(&mut f, model)?;
    f.flush()?;
    Ok(())
}

pub fn load_target(path: &std::path::Path) -> Result<TargetModel> {
    read_target(&mut std::io::BufReader::new(std::fs::File::open(path)?))
}

pub fn save_draft(path: &std::path::Path, model: &DraftModel) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_draft(&mut f, model)?;
    f.flush()?;
    Ok(())
}

pub fn load_draft(path: &std::path::Path, target: &TargetModel) -> Result<DraftModel> {
    read_draft(&mut std::io::BufReader::new(std::fs::File::open(path)?), target)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_round_trips_exactly() {
        let t = TargetModel::new(TargetConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_target(&mut buf, &t).unwrap();
        let back = read_target(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.weights_checksum(), t.weights_checksum());
    }

    #[test]
    fn draft_round_trips_and_checks_target() {
        let t = TargetModel::new(TargetConfig::default()).unwrap();
        let d = DraftModel::new(DraftConfig::for_target(t.config(), 3, 4, 2), &t).unwrap();
        let mut buf = Vec::new();
        write_draft(&mut buf, &d).unwrap();
        assert_eq!(read_draft(&mut buf.as_slice(), &t).unwrap(), d);

        let other = TargetModel::new(TargetConfig {
            d_model: 16,
            ..TargetConfig::default()
        })
        .unwrap();
        assert!(read_draft(&mut buf.as_slice(), &other).is_err());
        assert!(read_target(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn corrupt_input_rejected() {
        let t = TargetModel::new(TargetConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_target(&mut buf, &t).unwrap();
        assert!(read_target(&mut &buf[..buf.len() - 3]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_target(&mut extra.as_slice()).is_err());
        buf[0] = b'X';
        assert!(read_target(&mut buf.as_slice()).is_err());
    }
}

//! On-disk formats: checkpoints, datasets, and decode output.
//!
//! Checkpoint layout: magic `TMBR`, format version (u32 LE), length-prefixed
//! UTF-8 JSON config blob, then one record per parameter — name length (u32),
//! name bytes, rank (u32), dims (u32 each), little-endian f32 payload — read
//! until EOF. Dataset layout: magic `TMBD`, version, utterance count, then
//! per-utterance id, label ids, and a dims-headed f32 feature matrix.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelParams, Nnlm, NnlmConfig, RnntConfig, RnntModel};
use crate::tensor::Tensor;

const CKPT_MAGIC: &[u8; 4] = b"TMBR";
const DATA_MAGIC: &[u8; 4] = b"TMBD";
const VERSION: u32 = 1;

/// One training or test utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub labels: Vec<usize>,
    pub features: Tensor<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
enum CheckpointConfig {
    Rnnt(RnntConfig),
    Nnlm(NnlmConfig),
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn write_bytes(w: &mut impl Write, b: &[u8]) -> Result<()> {
    write_u32(w, b.len() as u32)?;
    w.write_all(b)?;
    Ok(())
}

fn read_bytes(r: &mut impl Read) -> Result<Vec<u8>> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn write_f32s(w: &mut impl Write, data: &[f32]) -> Result<()> {
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

fn save_checkpoint(path: &Path, config: &CheckpointConfig, params: &ModelParams) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(CKPT_MAGIC)?;
    write_u32(&mut w, VERSION)?;
    let blob = serde_json::to_string(config).map_err(|e| Error::Format(e.to_string()))?;
    write_bytes(&mut w, blob.as_bytes())?;
    for (name, t) in params.iter() {
        write_bytes(&mut w, name.as_bytes())?;
        write_u32(&mut w, t.rank() as u32)?;
        for &d in t.shape() {
            write_u32(&mut w, d as u32)?;
        }
        write_f32s(&mut w, t.data())?;
    }
    w.flush()?;
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<(CheckpointConfig, ModelParams)> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Format(format!("{}: not a checkpoint file", path.display())));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", version)));
    }
    let blob = read_bytes(&mut r)?;
    let config: CheckpointConfig = serde_json::from_slice(&blob)
        .map_err(|e| Error::Format(format!("bad checkpoint config: {}", e)))?;
    let mut params = ModelParams::new();
    loop {
        // name record or clean EOF
        let mut len_buf = [0u8; 4];
        match r.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = read_f32s(&mut r, numel)?;
        params.insert(name, Tensor::new(shape, data)?);
    }
    Ok((config, params))
}

pub fn save_rnnt(path: &Path, model: &RnntModel) -> Result<()> {
    save_checkpoint(path, &CheckpointConfig::Rnnt(model.config.clone()), &model.params)
}

pub fn load_rnnt(path: &Path) -> Result<RnntModel> {
    match load_checkpoint(path)? {
        (CheckpointConfig::Rnnt(config), params) => RnntModel::from_parts(config, params),
        _ => Err(Error::Format(format!("{}: not a transducer checkpoint", path.display()))),
    }
}

pub fn save_nnlm(path: &Path, model: &Nnlm) -> Result<()> {
    save_checkpoint(path, &CheckpointConfig::Nnlm(model.config.clone()), &model.params)
}

pub fn load_nnlm(path: &Path) -> Result<Nnlm> {
    match load_checkpoint(path)? {
        (CheckpointConfig::Nnlm(config), params) => Nnlm::from_parts(config, params),
        _ => Err(Error::Format(format!("{}: not a language-model checkpoint", path.display()))),
    }
}

pub fn save_dataset(path: &Path, utts: &[Utterance]) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(DATA_MAGIC)?;
    write_u32(&mut w, VERSION)?;
    write_u32(&mut w, utts.len() as u32)?;
    for u in utts {
        write_bytes(&mut w, u.id.as_bytes())?;
        write_u32(&mut w, u.labels.len() as u32)?;
        for &l in &u.labels {
            write_u32(&mut w, l as u32)?;
        }
        if u.features.rank() != 2 {
            return Err(Error::Contract(format!("utterance {} features must be rank 2", u.id)));
        }
        write_u32(&mut w, u.features.shape()[0] as u32)?;
        write_u32(&mut w, u.features.shape()[1] as u32)?;
        write_f32s(&mut w, u.features.data())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<Utterance>> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DATA_MAGIC {
        return Err(Error::Format(format!("{}: not a dataset file", path.display())));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset version {}", version)));
    }
    let count = read_u32(&mut r)? as usize;
    let mut utts = Vec::with_capacity(count);
    for _ in 0..count {
        let id = String::from_utf8(read_bytes(&mut r)?)
            .map_err(|_| Error::Format("utterance id is not UTF-8".into()))?;
        let n_labels = read_u32(&mut r)? as usize;
        let mut labels = Vec::with_capacity(n_labels);
        for _ in 0..n_labels {
            labels.push(read_u32(&mut r)? as usize);
        }
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let data = read_f32s(&mut r, rows * cols)?;
        utts.push(Utterance { id, labels, features: Tensor::matrix(rows, cols, data)? });
    }
    Ok(utts)
}

/// Write N-best decode output: one tab-separated line per hypothesis with
/// utterance id, rank, fused score, and space-joined symbols.
pub fn write_nbest(
    w: &mut impl Write,
    id: &str,
    hyps: &[crate::beam::Hypothesis],
    vocab: &crate::model::Vocab,
) -> Result<()> {
    for (rank, h) in hyps.iter().enumerate() {
        let text: Vec<&str> =
            h.labels.iter().map(|&l| vocab.symbol(l).unwrap_or("<unk>")).collect();
        writeln!(w, "{}\t{}\t{:.6}\t{}", id, rank + 1, h.fused_score, text.join(" "))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Vocab;

    #[test]
    fn rnnt_checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tmbr");
        let model = RnntModel::init(RnntConfig::desk(4, 8)).unwrap();
        save_rnnt(&path, &model).unwrap();
        let loaded = load_rnnt(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.params.max_abs_diff(&model.params), 0.0);
        for (a, b) in loaded.params.names().zip(model.params.names()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn nnlm_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lm.tmbr");
        let lm = Nnlm::init(NnlmConfig::desk(4)).unwrap();
        save_nnlm(&path, &lm).unwrap();
        let loaded = load_nnlm(&path).unwrap();
        assert_eq!(loaded.config, lm.config);
        assert_eq!(loaded.params.max_abs_diff(&lm.params), 0.0);
    }

    #[test]
    fn kind_mismatch_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tmbr");
        let lm = Nnlm::init(NnlmConfig::desk(4)).unwrap();
        save_nnlm(&path, &lm).unwrap();
        assert!(matches!(load_rnnt(&path), Err(Error::Format(_))));
    }

    #[test]
    fn garbage_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(load_rnnt(&path).is_err());
        assert!(load_dataset(&path).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.tmbd");
        let utts = vec![
            Utterance {
                id: "u1".into(),
                labels: vec![1, 3, 2],
                features: Tensor::matrix(4, 2, (0..8).map(|i| i as f32 * 0.5).collect()).unwrap(),
            },
            Utterance {
                id: "u2".into(),
                labels: vec![],
                features: Tensor::matrix(2, 2, vec![1.0, -1.0, 0.5, 0.25]).unwrap(),
            },
        ];
        save_dataset(&path, &utts).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), utts);
    }

    #[test]
    fn nbest_lines_are_tab_separated_with_rank() {
        let vocab = Vocab::synthetic(3);
        let hyps = vec![crate::beam::Hypothesis {
            labels: vec![1, 3],
            log_prob: -1.0,
            fused_score: -0.5,
            alignment: vec![],
        }];
        let mut buf = Vec::new();
        write_nbest(&mut buf, "utt7", &hyps, &vocab).unwrap();
        let line = String::from_utf8(buf).unwrap();
        assert_eq!(line, "utt7\t1\t-0.500000\ts1 s3\n");
    }
}

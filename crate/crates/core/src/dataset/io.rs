//! Two-file dataset layout: `<name>.tsv` (`utt_id<TAB>lang_id<TAB>transcript`)
//! and `<name>.feat` (magic `LCF1`, u32 count, then per utterance a
//! length-prefixed id, u32 T, u32 F and T×F little-endian binary32 values).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::{DatasetError, Utterance};

pub const FEAT_MAGIC: &[u8; 4] = b"LCF1";

fn paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{name}.tsv")), dir.join(format!("{name}.feat")))
}

pub fn write_dataset(dir: &Path, name: &str, utts: &[Utterance]) -> Result<(), DatasetError> {
    for u in utts {
        u.validate(None)?;
    }
    std::fs::create_dir_all(dir)?;
    let (tsv_path, feat_path) = paths(dir, name);
    let mut tsv = BufWriter::new(File::create(tsv_path)?);
    for u in utts {
        writeln!(tsv, "{}\t{}\t{}", u.id, u.lang, u.transcript)?;
    }
    tsv.flush()?;

    let mut feat = BufWriter::new(File::create(feat_path)?);
    feat.write_all(FEAT_MAGIC)?;
    feat.write_all(&(utts.len() as u32).to_le_bytes())?;
    for u in utts {
        feat.write_all(&(u.id.len() as u32).to_le_bytes())?;
        feat.write_all(u.id.as_bytes())?;
        feat.write_all(&(u.num_frames as u32).to_le_bytes())?;
        feat.write_all(&(u.feat_dim as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(u.features.len() * 4);
        for v in &u.features {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        feat.write_all(&buf)?;
    }
    feat.flush()?;
    Ok(())
}

struct TsvRow {
    id: String,
    lang: usize,
    transcript: String,
}

fn read_tsv(path: &Path) -> Result<Vec<TsvRow>, DatasetError> {
    let shown = path.display().to_string();
    let reader = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| DatasetError::Tsv {
            path: shown.clone(),
            line: i + 1,
            msg,
        };
        let mut parts = line.splitn(3, '\t');
        let (Some(id), Some(lang), Some(transcript)) = (parts.next(), parts.next(), parts.next())
        else {
            return Err(err("expected 3 tab-separated fields".into()));
        };
        let lang = lang
            .parse()
            .map_err(|_| err(format!("bad language id `{lang}`")))?;
        rows.push(TsvRow {
            id: id.to_string(),
            lang,
            transcript: transcript.to_string(),
        });
    }
    Ok(rows)
}

/// Transcripts of a `.tsv` listing, in file order.
pub fn read_transcripts(path: &Path) -> Result<Vec<String>, DatasetError> {
    Ok(read_tsv(path)?.into_iter().map(|r| r.transcript).collect())
}

fn read_u32(r: &mut impl Read) -> Option<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).ok()?;
    Some(u32::from_le_bytes(b))
}

pub fn read_dataset(dir: &Path, name: &str) -> Result<Vec<Utterance>, DatasetError> {
    let (tsv_path, feat_path) = paths(dir, name);
    let rows = read_tsv(&tsv_path)?;
    let shown = feat_path.display().to_string();
    let mut feat = BufReader::new(File::open(&feat_path)?);
    let header = |msg: &str| DatasetError::Header {
        path: shown.clone(),
        msg: msg.to_string(),
    };
    let mut magic = [0u8; 4];
    feat.read_exact(&mut magic)
        .map_err(|_| header("missing magic"))?;
    if &magic != FEAT_MAGIC {
        return Err(header("bad magic, expected LCF1"));
    }
    let count = read_u32(&mut feat).ok_or_else(|| header("missing utterance count"))? as usize;
    if count != rows.len() {
        return Err(DatasetError::Mismatch(format!(
            "{} lists {} utterances but {} holds {count}",
            tsv_path.display(),
            rows.len(),
            shown
        )));
    }
    let mut out = Vec::with_capacity(count);
    for row in rows {
        let truncated = || DatasetError::Truncated {
            path: shown.clone(),
            utt: row.id.clone(),
        };
        let len = read_u32(&mut feat).ok_or_else(truncated)? as usize;
        let mut id = vec![0u8; len];
        feat.read_exact(&mut id).map_err(|_| truncated())?;
        if id != row.id.as_bytes() {
            return Err(DatasetError::Mismatch(format!(
                "feature record `{}` where transcript `{}` was expected",
                String::from_utf8_lossy(&id),
                row.id
            )));
        }
        let t = read_u32(&mut feat).ok_or_else(truncated)? as usize;
        let f = read_u32(&mut feat).ok_or_else(truncated)? as usize;
        let mut raw = vec![0u8; t * f * 4];
        feat.read_exact(&mut raw).map_err(|_| truncated())?;
        let features = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let utt = Utterance {
            id: row.id,
            lang: row.lang,
            num_frames: t,
            feat_dim: f,
            features,
            transcript: row.transcript,
        };
        utt.validate(None)?;
        out.push(utt);
    }
    let mut rest = [0u8; 1];
    if feat.read(&mut rest)? != 0 {
        return Err(header("trailing bytes after the last utterance"));
    }
    Ok(out)
}

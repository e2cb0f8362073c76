use std::fs;
use std::io::Write;
use std::path::Path;

use super::{CorpusError, InstructionRecord, ParallelCorpus};

/// Undecoded source/target line pair.
pub type RawPair = (Vec<u8>, Vec<u8>);

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn lines(bytes: &[u8]) -> Vec<&[u8]> {
    if bytes.is_empty() {
        return Vec::new();
    }
    let body = bytes.strip_suffix(b"\n").unwrap_or(bytes);
    body.split(|&b| b == b'\n')
        .map(|l| l.strip_suffix(b"\r").unwrap_or(l))
        .collect()
}

/// Reads `src<TAB>tgt` lines.
pub fn read_tsv(path: impl AsRef<Path>) -> Result<Vec<RawPair>, CorpusError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    lines(&bytes)
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            let tab = l.iter().position(|&b| b == b'\t').ok_or_else(|| {
                CorpusError::Format(format!("{}:{}: missing tab separator", path.display(), i + 1))
            })?;
            Ok((l[..tab].to_vec(), l[tab + 1..].to_vec()))
        })
        .collect()
}

/// Reads two line-aligned files.
pub fn read_aligned(src: impl AsRef<Path>, tgt: impl AsRef<Path>) -> Result<Vec<RawPair>, CorpusError> {
    let (sp, tp) = (src.as_ref(), tgt.as_ref());
    let sb = fs::read(sp).map_err(io_err(sp))?;
    let tb = fs::read(tp).map_err(io_err(tp))?;
    let (sl, tl) = (lines(&sb), lines(&tb));
    if sl.len() != tl.len() {
        return Err(CorpusError::Format(format!(
            "{} has {} lines but {} has {}",
            sp.display(),
            sl.len(),
            tp.display(),
            tl.len()
        )));
    }
    Ok(sl.into_iter().zip(tl).map(|(s, t)| (s.to_vec(), t.to_vec())).collect())
}

pub fn write_tsv(path: impl AsRef<Path>, corpus: &ParallelCorpus) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let mut out = String::new();
    for p in &corpus.pairs {
        out.push_str(&p.src);
        out.push('\t');
        out.push_str(&p.tgt);
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn write_aligned(src: impl AsRef<Path>, tgt: impl AsRef<Path>, corpus: &ParallelCorpus) -> Result<(), CorpusError> {
    let join = |f: fn(&super::SentencePair) -> &str| {
        corpus.pairs.iter().map(|p| format!("{}\n", f(p))).collect::<String>()
    };
    let (sp, tp) = (src.as_ref(), tgt.as_ref());
    fs::write(sp, join(|p| &p.src)).map_err(io_err(sp))?;
    fs::write(tp, join(|p| &p.tgt)).map_err(io_err(tp))
}

/// One JSON object per line with keys `system`, `user`, `assistant`.
pub fn write_instructions(path: impl AsRef<Path>, records: &[InstructionRecord]) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| CorpusError::Format(e.to_string()))?;
        writeln!(f, "{line}").map_err(io_err(path))?;
    }
    Ok(())
}

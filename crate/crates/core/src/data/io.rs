//! Corpus directory layout: a manifest of `key=file` lines, one text file per
//! token column (one sample per line, ids space-separated), and per speech
//! column a binary file of little-endian f64 frames plus an index of
//! `byte_offset frames dim` lines.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{AsrPair, CorpusSplit, MtPair, Quadruple, StPair};
use crate::error::{Error, Result};
use crate::model::TokenSeq;
use crate::numcore::Tensor;

pub const MANIFEST: &str = "manifest.txt";

const QUAD_SETS: [&str; 2] = ["dev", "test"];

fn corpus_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Corpus {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn toks<'a>(v: Vec<&'a TokenSeq>) -> Vec<&'a [usize]> {
    v.into_iter().map(Vec::as_slice).collect()
}

fn write_tokens(path: &Path, rows: &[&[usize]]) -> Result<()> {
    let mut out = String::new();
    for row in rows {
        let line: Vec<String> = row.iter().map(ToString::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn read_tokens(path: &Path) -> Result<Vec<TokenSeq>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            line.split_whitespace()
                .map(|w| w.parse().map_err(|_| corpus_err(path, format!("line {}: bad id {w:?}", i + 1))))
                .collect()
        })
        .collect()
}

fn write_speech(bin: &Path, idx: &Path, frames: &[&Tensor]) -> Result<()> {
    let mut bytes = Vec::new();
    let mut index = String::new();
    for s in frames {
        index.push_str(&format!("{} {} {}\n", bytes.len(), s.rows(), s.cols()));
        for x in s.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(bin, bytes)?;
    fs::write(idx, index)?;
    Ok(())
}

fn read_speech(bin: &Path, idx: &Path) -> Result<Vec<Tensor>> {
    let bytes = fs::read(bin)?;
    let index = fs::read_to_string(idx)?;
    index
        .lines()
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<usize> = line
                .split_whitespace()
                .map(|w| w.parse().map_err(|_| corpus_err(idx, format!("line {}: bad field", i + 1))))
                .collect::<Result<_>>()?;
            let [offset, rows, cols] = f[..] else {
                return Err(corpus_err(idx, format!("line {}: expected 3 fields", i + 1)));
            };
            let end = offset + rows * cols * 8;
            let chunk = bytes
                .get(offset..end)
                .ok_or_else(|| corpus_err(bin, format!("sample {i} runs past end of file")))?;
            let data = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            Tensor::matrix(rows, cols, data)
        })
        .collect()
}

struct Writer<'a> {
    dir: &'a Path,
    manifest: Vec<String>,
}

impl Writer<'_> {
    fn tokens(&mut self, key: &str, rows: &[&[usize]]) -> Result<()> {
        let file = format!("{key}.txt");
        write_tokens(&self.dir.join(&file), rows)?;
        self.manifest.push(format!("{key}={file}"));
        Ok(())
    }

    fn speech(&mut self, key: &str, frames: &[&Tensor]) -> Result<()> {
        let file = format!("{key}.bin");
        write_speech(&self.dir.join(&file), &self.dir.join(format!("{key}.idx")), frames)?;
        self.manifest.push(format!("{key}={file}"));
        Ok(())
    }
}

pub fn save_corpus(dir: &Path, corpus: &CorpusSplit) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = Writer {
        dir,
        manifest: vec![
            format!("vocab_size={}", corpus.vocab_size),
            format!("feature_dim={}", corpus.feature_dim),
        ],
    };
    w.tokens("mt.train.x", &toks(corpus.mt_train.iter().map(|p| &p.x).collect()))?;
    w.tokens("mt.train.y", &toks(corpus.mt_train.iter().map(|p| &p.y).collect()))?;
    w.speech("asr.train.s", &corpus.asr_train.iter().map(|p| &p.s).collect::<Vec<_>>())?;
    w.tokens("asr.train.t", &toks(corpus.asr_train.iter().map(|p| &p.t).collect()))?;
    w.speech("st.train.s", &corpus.st_train.iter().map(|p| &p.s).collect::<Vec<_>>())?;
    w.tokens("st.train.y", &toks(corpus.st_train.iter().map(|p| &p.y).collect()))?;
    for (name, set) in QUAD_SETS.iter().zip([&corpus.dev, &corpus.test]) {
        w.speech(&format!("{name}.s"), &set.iter().map(|q| &q.s).collect::<Vec<_>>())?;
        w.tokens(&format!("{name}.t"), &toks(set.iter().map(|q| &q.t).collect()))?;
        w.tokens(&format!("{name}.x"), &toks(set.iter().map(|q| &q.x).collect()))?;
        w.tokens(&format!("{name}.y"), &toks(set.iter().map(|q| &q.y).collect()))?;
        w.tokens(&format!("{name}.durations"), &toks(set.iter().map(|q| &q.durations).collect()))?;
    }
    let mut manifest = w.manifest.join("\n");
    manifest.push('\n');
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

struct Reader {
    dir: PathBuf,
    entries: BTreeMap<String, String>,
}

impl Reader {
    fn file(&self, key: &str) -> Result<PathBuf> {
        self.entries
            .get(key)
            .map(|f| self.dir.join(f))
            .ok_or_else(|| corpus_err(&self.dir.join(MANIFEST), format!("missing key {key}")))
    }

    fn tokens(&self, key: &str) -> Result<Vec<TokenSeq>> {
        read_tokens(&self.file(key)?)
    }

    fn speech(&self, key: &str) -> Result<Vec<Tensor>> {
        let bin = self.file(key)?;
        read_speech(&bin, &bin.with_extension("idx"))
    }

    fn number(&self, key: &str) -> Result<usize> {
        let v = self
            .entries
            .get(key)
            .ok_or_else(|| corpus_err(&self.dir.join(MANIFEST), format!("missing key {key}")))?;
        v.parse()
            .map_err(|_| corpus_err(&self.dir.join(MANIFEST), format!("{key}: not a number")))
    }
}

fn same_len(path: &Path, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(corpus_err(path, format!("column lengths differ: {a} vs {b}")));
    }
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<CorpusSplit> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| corpus_err(&manifest_path, e.to_string()))?;
    let mut entries = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| corpus_err(&manifest_path, format!("line {}: expected key=value", i + 1)))?;
        entries.insert(k.trim().to_string(), v.trim().to_string());
    }
    let r = Reader { dir: dir.to_path_buf(), entries };

    let (x, y) = (r.tokens("mt.train.x")?, r.tokens("mt.train.y")?);
    same_len(&manifest_path, x.len(), y.len())?;
    let mt_train = x.into_iter().zip(y).map(|(x, y)| MtPair { x, y }).collect();
    let (s, t) = (r.speech("asr.train.s")?, r.tokens("asr.train.t")?);
    same_len(&manifest_path, s.len(), t.len())?;
    let asr_train = s.into_iter().zip(t).map(|(s, t)| AsrPair { s, t }).collect();
    let (s, y) = (r.speech("st.train.s")?, r.tokens("st.train.y")?);
    same_len(&manifest_path, s.len(), y.len())?;
    let st_train = s.into_iter().zip(y).map(|(s, y)| StPair { s, y }).collect();

    let mut quads = Vec::new();
    for name in QUAD_SETS {
        let s = r.speech(&format!("{name}.s"))?;
        let t = r.tokens(&format!("{name}.t"))?;
        let x = r.tokens(&format!("{name}.x"))?;
        let y = r.tokens(&format!("{name}.y"))?;
        let d = r.tokens(&format!("{name}.durations"))?;
        for n in [t.len(), x.len(), y.len(), d.len()] {
            same_len(&manifest_path, s.len(), n)?;
        }
        let set: Vec<Quadruple> = s
            .into_iter()
            .zip(t)
            .zip(x)
            .zip(y)
            .zip(d)
            .map(|((((s, t), x), y), durations)| Quadruple { s, t, x, y, durations })
            .collect();
        quads.push(set);
    }
    let test = quads.pop().unwrap_or_default();
    let dev = quads.pop().unwrap_or_default();
    let corpus = CorpusSplit {
        vocab_size: r.number("vocab_size")?,
        feature_dim: r.number("feature_dim")?,
        mt_train,
        asr_train,
        st_train,
        dev,
        test,
    };
    let vocab = corpus.vocab()?;
    let token_cols = corpus
        .mt_train
        .iter()
        .flat_map(|p| [&p.x, &p.y])
        .chain(corpus.asr_train.iter().map(|p| &p.t))
        .chain(corpus.st_train.iter().map(|p| &p.y))
        .chain(corpus.dev.iter().chain(&corpus.test).flat_map(|q| [&q.t, &q.x, &q.y]));
    for seq in token_cols {
        vocab.check(seq)?;
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_corpus, SplitSizes, SyntheticTaskSpec};

    #[test]
    fn bit_exact_round_trip() {
        let spec = SyntheticTaskSpec {
            sizes: SplitSizes { mt_train: 6, asr_train: 5, st_train: 4, dev: 3, test: 2 },
            ..Default::default()
        };
        let corpus = gen_corpus(&spec, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_corpus(dir.path(), &corpus).unwrap();
        let back = load_corpus(dir.path()).unwrap();
        assert_eq!(back, corpus);
        let dir2 = tempfile::tempdir().unwrap();
        save_corpus(dir2.path(), &back).unwrap();
        for f in ["asr.train.s.bin", "dev.s.idx", "mt.train.x.txt", MANIFEST] {
            assert_eq!(fs::read(dir.path().join(f)).unwrap(), fs::read(dir2.path().join(f)).unwrap());
        }
    }

    #[test]
    fn truncated_speech_is_an_error() {
        let spec = SyntheticTaskSpec {
            sizes: SplitSizes { mt_train: 2, asr_train: 2, st_train: 2, dev: 2, test: 2 },
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        save_corpus(dir.path(), &gen_corpus(&spec, 0).unwrap()).unwrap();
        let bin = dir.path().join("dev.s.bin");
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_corpus(dir.path()), Err(Error::Corpus { .. })));
        assert!(load_corpus(&dir.path().join("missing")).is_err());
    }
}

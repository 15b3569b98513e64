//! Dataset directories: `images/*.png` plus an optional `labels.jsonl` in the
//! public structure-annotation schema.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::grammar::{vocab, TokenId, TokenSeq};
use crate::imageio::load_png;
use crate::tensor::Tensor;

pub const LABELS_FILE: &str = "labels.jsonl";
pub const IMAGES_DIR: &str = "images";

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub filename: String,
    /// `None` when the record carries no split field.
    pub split: Option<String>,
    /// Framed structure sequence.
    pub tokens: TokenSeq,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub records: usize,
    pub total_tokens: usize,
    pub unknown_tokens: usize,
    /// Count per vocabulary entry after mapping; unknown strings land on `<unk>`.
    pub histogram: BTreeMap<String, usize>,
    /// Raw strings that fell outside the vocabulary.
    pub unknown_strings: BTreeMap<String, usize>,
}

fn record_from_value(v: &Value, line: usize) -> Result<(String, Option<String>, Vec<String>)> {
    let bad = |reason: &str| Error::MalformedRecord { line, reason: reason.to_string() };
    let filename = v.get("filename").and_then(Value::as_str).ok_or_else(|| bad("missing \"filename\""))?;
    let split = v.get("split").and_then(Value::as_str).map(str::to_string);
    let structure = v
        .get("html")
        .and_then(|h| h.get("structure"))
        .ok_or_else(|| bad("missing \"html.structure\""))?;
    let tokens = structure
        .get("tokens")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing \"html.structure.tokens\""))?
        .iter()
        .map(|t| t.as_str().map(str::to_string).ok_or_else(|| bad("non-string token")))
        .collect::<Result<Vec<_>>>()?;
    Ok((filename.to_string(), split, tokens))
}

/// Reads a JSON-lines annotation file; extra fields are ignored.
pub fn ingest_pubtabnet(path: &Path) -> Result<(Vec<DatasetRecord>, IngestReport)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut report = IngestReport::default();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(line)
            .map_err(|e| Error::MalformedRecord { line: line_no, reason: e.to_string() })?;
        let (filename, split, strings) = record_from_value(&v, line_no)?;
        let seq = TokenSeq::from_strings(&strings);
        for (s, &id) in strings.iter().zip(&seq.ids) {
            *report.histogram.entry(vocab().token(id).to_string()).or_default() += 1;
            if id == TokenId::UNK {
                report.unknown_tokens += 1;
                *report.unknown_strings.entry(s.clone()).or_default() += 1;
            }
        }
        report.total_tokens += seq.ids.len();
        report.records += 1;
        records.push(DatasetRecord { filename, split, tokens: TokenSeq::frame(&seq.ids) });
    }
    Ok((records, report))
}

/// Sorted PNG paths under `dir/images`.
pub fn image_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let images = dir.join(IMAGES_DIR);
    let mut out = Vec::new();
    for entry in fs::read_dir(&images).map_err(|e| Error::io(&images, e))? {
        let p = entry.map_err(|e| Error::io(&images, e))?.path();
        if p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
            out.push(p);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(out)
}

/// Loads every image in `dir/images`, resized to `height × width`, without
/// touching any annotation file.
pub fn load_images(dir: &Path, height: usize, width: usize) -> Result<Vec<(String, Tensor<f32>)>> {
    image_paths(dir)?
        .into_iter()
        .map(|p| {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            Ok((name, load_png(&p, height, width)?))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub id: String,
    pub image: Tensor<f32>,
    pub tokens: TokenSeq,
}

#[derive(Clone, Debug)]
pub struct LabeledDataset {
    pub train: Vec<LabeledImage>,
    pub val: Vec<LabeledImage>,
    pub report: IngestReport,
}

/// Images with their structure labels. Records whose split is `val` (or
/// `test`) form the validation part; all others train.
pub fn load_labeled(dir: &Path, height: usize, width: usize) -> Result<LabeledDataset> {
    let (records, report) = ingest_pubtabnet(&dir.join(LABELS_FILE))?;
    if records.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for r in records {
        let image = load_png(&dir.join(IMAGES_DIR).join(&r.filename), height, width)?;
        let item = LabeledImage { id: r.filename.clone(), image, tokens: r.tokens };
        match r.split.as_deref() {
            Some("val") | Some("test") => val.push(item),
            _ => train.push(item),
        }
    }
    Ok(LabeledDataset { train, val, report })
}

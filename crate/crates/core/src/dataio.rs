//! Binary PPM images, JSON Lines manifests, bilinear resizing and the
//! embedding-matrix / label files exchanged between pipeline stages.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tnsr;

/// Decodes a binary `P6` PPM with maxval 255 into an `H x W x 3` tensor of
/// `v / 255` values.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0usize;
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::format(0, "not a binary PPM (expected \"P6\")"));
    }
    pos += 2;
    let mut fields = [0usize; 3];
    for (k, name) in ["width", "height", "maxval"].iter().enumerate() {
        // whitespace and '#' comments before each field
        let start = pos;
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        if pos == start {
            return Err(Error::format(pos as u64, format!("expected whitespace before {name}")));
        }
        let digits_at = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[digits_at..pos]).unwrap();
        fields[k] = text
            .parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::format(digits_at as u64, format!("bad {name} {text:?}")))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::format(pos as u64, format!("maxval {maxval} unsupported, need 255")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(pos as u64, "expected single whitespace before pixel data"));
    }
    pos += 1;
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Error::format(3, "image dimensions overflow"))?;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated pixel data: need {need} bytes, have {}", payload.len()),
        ));
    }
    if payload.len() > need {
        return Err(Error::format((pos + need) as u64, "trailing bytes after pixel data"));
    }
    let data = payload.iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(vec![height, width, 3], data)
}

/// Quantizes `[0, 1]` values to bytes (round to nearest, clamped).
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w, c) = image.hwc()?;
    if c != 3 {
        return Err(Error::invalid(format!("PPM needs 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| to_u8(v)));
    Ok(out)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|e| match e {
        Error::Format { offset, msg } => Error::Format {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    std::fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

/// Bilinear resampling with half-pixel centers (align-corners false).
pub fn resize(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w, c) = image.hwc()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize target must be nonempty"));
    }
    let src = image.data();
    let axis = |dst: usize, n_in: usize, n_out: usize| -> (usize, usize, f32) {
        let scale = n_in as f64 / n_out as f64;
        let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, (s - lo as f64) as f32)
    };
    let cols: Vec<_> = (0..out_w).map(|x| axis(x, w, out_w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for y in 0..out_h {
        let (y0, y1, fy) = axis(y, h, out_h);
        for &(x0, x1, fx) in &cols {
            for ch in 0..c {
                let p = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch];
                let top = p(y0, x0) + (p(y0, x1) - p(y0, x0)) * fx;
                let bot = p(y1, x0) + (p(y1, x1) - p(y1, x0)) * fx;
                out.push((top + (bot - top) * fy).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(vec![out_h, out_w, c], out)
}

/// Square bilinear resize to `out_side x out_side`.
pub fn bilinear_resize(image: &Tensor, out_side: usize) -> Result<Tensor> {
    if out_side < 2 {
        return Err(Error::invalid(format!("out_side must be >= 2, got {out_side}")));
    }
    resize(image, out_side, out_side)
}

/// Loads a PPM and resizes it to `side x side` when needed.
pub fn load_image(path: &Path, side: usize) -> Result<Tensor> {
    let img = read_ppm(path)?;
    if img.dims() == [side, side, 3] {
        Ok(img)
    } else {
        bilinear_resize(&img, side)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub id: String,
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<i64>,
}

/// Parses and validates JSON Lines manifest text. Blank lines are skipped.
pub fn parse_manifest(text: &str) -> Result<Vec<ImageRecord>> {
    let mut records = Vec::new();
    let mut lines = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ImageRecord = serde_json::from_str(line)
            .map_err(|e| Error::dataset(format!("manifest line {}: {e}", n + 1)))?;
        records.push(rec);
        lines.push(n + 1);
    }
    let mut ids = HashSet::new();
    let mut pairs: HashMap<i64, Vec<usize>> = HashMap::new();
    for (rec, &line) in records.iter().zip(&lines) {
        if rec.id.is_empty() {
            return Err(Error::dataset(format!("manifest line {line}: empty id")));
        }
        if !ids.insert(rec.id.as_str()) {
            return Err(Error::dataset(format!("manifest line {line}: duplicate id {:?}", rec.id)));
        }
        if let Some(p) = rec.pair_id {
            pairs.entry(p).or_default().push(line);
        }
    }
    let mut bad: Vec<_> = pairs.iter().filter(|(_, v)| v.len() != 2).collect();
    bad.sort_by_key(|(_, v)| v[0]);
    if let Some((p, v)) = bad.first() {
        return Err(Error::dataset(format!(
            "manifest line {}: pair_id {p} has {} records, expected 2",
            v[0],
            v.len()
        )));
    }
    Ok(records)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ImageRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text).map_err(|e| match e {
        Error::Dataset(msg) => Error::Dataset(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn manifest_to_string(records: &[ImageRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn write_manifest(path: &Path, records: &[ImageRecord]) -> Result<()> {
    std::fs::write(path, manifest_to_string(records)).map_err(|e| Error::io(path, e))
}

/// A manifest together with the directory its relative paths resolve
/// against (the manifest file's own directory).
#[derive(Clone, Debug)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<ImageRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let records = read_manifest(path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, records })
    }

    pub fn resolve(&self, rec: &ImageRecord) -> PathBuf {
        self.root.join(&rec.path)
    }

    /// Loads every image at `side x side`; unreadable files are dataset
    /// errors naming the file.
    pub fn load_images(&self, side: usize) -> Result<Vec<Tensor>> {
        use rayon::prelude::*;
        self.records
            .par_iter()
            .map(|r| {
                let path = self.resolve(r);
                load_image(&path, side).map_err(|e| {
                    Error::dataset(format!("cannot read image {}: {e}", path.display()))
                })
            })
            .collect()
    }

    /// Records grouped by pair id, in first-appearance order.
    pub fn pairs(&self) -> Result<Vec<(i64, usize, usize)>> {
        let mut first: HashMap<i64, usize> = HashMap::new();
        let mut out = Vec::new();
        for (i, r) in self.records.iter().enumerate() {
            let p = r
                .pair_id
                .ok_or_else(|| Error::dataset(format!("record {:?} has no pair_id", r.id)))?;
            match first.remove(&p) {
                Some(j) => out.push((p, j, i)),
                None => {
                    first.insert(p, i);
                }
            }
        }
        if let Some((p, _)) = first.into_iter().next() {
            return Err(Error::dataset(format!("pair_id {p} has a single record")));
        }
        out.sort_by_key(|&(_, a, _)| a);
        Ok(out)
    }
}

/// Writes `N x D` row vectors as a rank-2 TNSR.
pub fn write_embeddings(path: &Path, rows: &[Vec<f32>]) -> Result<()> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::invalid("embedding matrix must be nonempty and rectangular"));
    }
    let data = rows.iter().flatten().copied().collect();
    tnsr::write_tnsr(path, &Tensor::new(vec![rows.len(), d], data)?)
}

pub fn read_embeddings(path: &Path) -> Result<Vec<Vec<f32>>> {
    let t = tnsr::read_tnsr(path)?;
    match *t.dims() {
        [_, d] => Ok(t.data().chunks(d).map(<[f32]>::to_vec).collect()),
        _ => Err(Error::format(6, format!("embedding matrix must be rank 2, got {:?}", t.dims()))),
    }
}

pub fn write_labels(path: &Path, labels: &[i64]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for l in labels {
        writeln!(f, "{l}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<Vec<i64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.trim().parse::<i64>().map_err(|_| {
                Error::dataset(format!("{} line {}: bad label {l:?}", path.display(), n + 1))
            })
        })
        .collect()
}

use std::fs;
use std::path::{Path, PathBuf};

use super::render::{mask_to_tensor, rgb_to_tensor, tensor_to_rgb};
use super::{DataError, Sample, Vocabulary};

pub const MANIFEST: &str = "manifest.tsv";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, offset: usize, reason: impl Into<String>) -> DataError {
    DataError::Parse {
        path: path.to_path_buf(),
        offset,
        reason: reason.into(),
    }
}

/// Binary PNM (`P6` colour or `P5` gray) with maxval 255.
fn encode_pnm(magic: &str, width: usize, height: usize, payload: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(payload);
    out
}

/// Parse a binary PNM; returns `(width, height, payload)`.
fn decode_pnm<'a>(
    bytes: &'a [u8],
    magic: &[u8; 2],
    channels: usize,
    path: &Path,
) -> Result<(usize, usize, &'a [u8]), DataError> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(parse_err(
            path,
            0,
            format!("expected magic {}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos == start {
            return Err(parse_err(path, pos, "expected whitespace"));
        }
        let digits = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == digits {
            return Err(parse_err(path, pos, "expected a decimal number"));
        }
        *field = std::str::from_utf8(&bytes[digits..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| parse_err(path, digits, "number out of range"))?;
        if *field == 0 {
            return Err(parse_err(path, digits, "zero header field"));
        }
        if i == 2 && *field != 255 {
            return Err(parse_err(path, digits, "maxval must be 255"));
        }
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(parse_err(path, pos, "expected a single whitespace byte after maxval"));
    }
    pos += 1;
    let [width, height, _] = fields;
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| parse_err(path, 2, "extents overflow"))?;
    let payload = &bytes[pos..];
    if payload.len() != expected {
        return Err(parse_err(
            path,
            pos + payload.len().min(expected),
            format!("payload has {} bytes, expected {expected}", payload.len()),
        ));
    }
    Ok((width, height, payload))
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    encode_pnm("P6", width, height, rgb)
}

pub fn decode_ppm<'a>(bytes: &'a [u8], path: &Path) -> Result<(usize, usize, &'a [u8]), DataError> {
    decode_pnm(bytes, b"P6", 3, path)
}

/// Boolean mask as a `P5` file with values 0 and 255.
pub fn encode_pgm_mask(width: usize, height: usize, mask: &[bool]) -> Vec<u8> {
    let payload: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    encode_pnm("P5", width, height, &payload)
}

pub fn decode_pgm_mask(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<bool>), DataError> {
    let (w, h, payload) = decode_pnm(bytes, b"P5", 1, path)?;
    let start = bytes.len() - payload.len();
    let mask = payload
        .iter()
        .enumerate()
        .map(|(i, &b)| match b {
            0 => Ok(false),
            255 => Ok(true),
            other => Err(parse_err(
                path,
                start + i,
                format!("mask value {other} is neither 0 nor 255"),
            )),
        })
        .collect::<Result<_, _>>()?;
    Ok((w, h, mask))
}

fn image_name(id: usize) -> String {
    format!("images/{id:06}.ppm")
}

fn mask_name(id: usize) -> String {
    format!("masks/{id:06}.pgm")
}

/// Write `samples` under `dir` as `manifest.tsv`, `images/*.ppm` and
/// `masks/*.pgm`.
pub fn write_dataset(samples: &[Sample], dir: &Path) -> Result<(), DataError> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    let mut manifest = String::new();
    for s in samples {
        let (h, w) = (s.target_mask.shape()[0], s.target_mask.shape()[1]);
        let (img, msk) = (image_name(s.sample_id), mask_name(s.sample_id));
        let img_path = dir.join(&img);
        fs::write(&img_path, encode_ppm(w, h, &tensor_to_rgb(&s.image))).map_err(io_err(&img_path))?;
        let mask: Vec<bool> = s.target_mask.data().iter().map(|&v| v != 0.0).collect();
        let mask_path = dir.join(&msk);
        fs::write(&mask_path, encode_pgm_mask(w, h, &mask)).map_err(io_err(&mask_path))?;
        manifest.push_str(&format!(
            "{}\t{img}\t{msk}\t{}\t{}\n",
            s.sample_id,
            s.words.join(" "),
            s.descriptor
        ));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(io_err(&path))
}

/// One parsed manifest line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub sample_id: usize,
    pub image_path: String,
    pub mask_path: String,
    pub words: Vec<String>,
    pub descriptor: String,
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ManifestEntry>, DataError> {
    let mut offset = 0;
    let mut out = Vec::new();
    for line in text.split_inclusive('\n') {
        let body = line.strip_suffix('\n').unwrap_or(line);
        let fields: Vec<&str> = body.split('\t').collect();
        if fields.len() != 5 {
            return Err(parse_err(
                path,
                offset,
                format!("expected 5 tab-separated fields, found {}", fields.len()),
            ));
        }
        let sample_id = fields[0]
            .parse()
            .map_err(|_| parse_err(path, offset, format!("bad sample id {:?}", fields[0])))?;
        let words: Vec<String> = fields[3]
            .split(' ')
            .filter(|w| !w.is_empty())
            .map(str::to_string)
            .collect();
        if words.is_empty() {
            return Err(parse_err(path, offset, "empty expression"));
        }
        out.push(ManifestEntry {
            sample_id,
            image_path: fields[1].to_string(),
            mask_path: fields[2].to_string(),
            words,
            descriptor: fields[4].to_string(),
        });
        offset += line.len();
    }
    Ok(out)
}

/// Read a directory written by [`write_dataset`], encoding words with
/// `vocab`.
pub fn read_dataset(dir: &Path, vocab: &Vocabulary) -> Result<Vec<Sample>, DataError> {
    let path = dir.join(MANIFEST);
    let text = fs::read(&path).map_err(io_err(&path))?;
    let text = String::from_utf8(text).map_err(|e| parse_err(&path, e.utf8_error().valid_up_to(), "invalid UTF-8"))?;
    parse_manifest(&text, &path)?
        .into_iter()
        .map(|e| {
            let img_path: PathBuf = dir.join(&e.image_path);
            let bytes = fs::read(&img_path).map_err(io_err(&img_path))?;
            let (w, h, rgb) = decode_ppm(&bytes, &img_path)?;
            let image = rgb_to_tensor(rgb, w, h);
            let mask_path = dir.join(&e.mask_path);
            let bytes = fs::read(&mask_path).map_err(io_err(&mask_path))?;
            let (mw, mh, mask) = decode_pgm_mask(&bytes, &mask_path)?;
            if (mw, mh) != (w, h) {
                return Err(parse_err(&mask_path, 0, format!("mask is {mw}×{mh}, image is {w}×{h}")));
            }
            Ok(Sample {
                sample_id: e.sample_id,
                image,
                tokens: vocab.encode(&e.words)?,
                words: e.words,
                target_mask: mask_to_tensor(&mask, w, h),
                descriptor: e.descriptor,
            })
        })
        .collect()
}

//! On-disk formats: tensor checkpoints, dataset directories, and image dumps.
//!
//! A checkpoint is a text header followed by raw little-endian `f64` data:
//!
//! ```text
//! CSSCKPT 1
//! tensor student.enc1.w 27x16
//! tensor run.epoch scalar
//! end
//! <payload>
//! ```

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use sha2::{Digest, Sha256};

use crate::data::{DataConfig, DatasetSplit, LabelMap, Mask, Role, SegSample, CHANNELS};
use crate::error::{Error, Result};
use crate::grad::Tensor;

const CHECKPOINT_MAGIC: &str = "CSSCKPT 1";
const MANIFEST_MAGIC: &str = "# css dataset 1";

pub fn write_checkpoint(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let mut header = format!("{CHECKPOINT_MAGIC}\n");
    for (name, t) in tensors {
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::Contract(format!("checkpoint tensor name `{name}` must be a single word")));
        }
        let dims = if t.shape().is_empty() {
            "scalar".to_string()
        } else {
            t.shape().iter().map(usize::to_string).collect::<Vec<_>>().join("x")
        };
        let _ = writeln!(header, "tensor {name} {dims}");
    }
    header.push_str("end\n");
    let mut bytes = header.into_bytes();
    for (_, t) in tensors {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    // write-then-rename so an interrupted run never leaves a torn checkpoint
    let tmp = path.with_extension("tmp");
    fs::File::create(&tmp)?.write_all(&bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut reader = BufReader::new(fs::File::open(path)?);
    let mut line = String::new();
    let mut next_line = |reader: &mut BufReader<fs::File>| -> Result<String> {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(Error::format(path, "truncated header"));
        }
        Ok(line.trim_end_matches('\n').to_string())
    };
    if next_line(&mut reader)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a checkpoint file"));
    }
    let mut entries = Vec::new();
    loop {
        let l = next_line(&mut reader)?;
        if l == "end" {
            break;
        }
        let parts: Vec<&str> = l.split(' ').collect();
        let ["tensor", name, dims] = parts.as_slice() else {
            return Err(Error::format(path, format!("bad header line `{l}`")));
        };
        let shape: Vec<usize> = if *dims == "scalar" {
            Vec::new()
        } else {
            dims.split('x')
                .map(|d| d.parse().map_err(|_| Error::format(path, format!("bad dimension in `{l}`"))))
                .collect::<Result<_>>()?
        };
        entries.push((name.to_string(), shape));
    }
    let mut out = Vec::with_capacity(entries.len());
    for (name, shape) in entries {
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        reader.read_exact(&mut raw).map_err(|_| Error::format(path, format!("payload of `{name}` is truncated")))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if reader.read(&mut [0u8; 1])? != 0 {
        return Err(Error::format(path, "trailing bytes after payload"));
    }
    Ok(out)
}

/// Removes and returns the tensor called `name`.
pub fn take_tensor(tensors: &mut Vec<(String, Tensor)>, name: &str, path: &Path) -> Result<Tensor> {
    let at = tensors
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| Error::format(path, format!("missing tensor `{name}`")))?;
    Ok(tensors.remove(at).1)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `[3, H, W]` image in `[0, 1]` as interleaved RGB bytes.
pub fn image_bytes(image: &Tensor) -> Result<Vec<u8>> {
    let &[CHANNELS, h, w] = image.shape() else {
        return Err(Error::shape("image_bytes", format!("expected [3,H,W], got {:?}", image.shape())));
    };
    let d = image.data();
    Ok((0..h * w).flat_map(|p| (0..CHANNELS).map(move |c| to_byte(d[c * h * w + p]))).collect())
}

fn write_pnm(path: &Path, width: usize, height: usize, bytes: &[u8], subtype: PnmSubtype, color: ExtendedColorType) -> Result<()> {
    let mut file = std::io::BufWriter::new(fs::File::create(path)?);
    PnmEncoder::new(&mut file).with_subtype(subtype).write_image(bytes, width as u32, height as u32, color)?;
    file.flush()?;
    Ok(())
}

/// Binary (P6) PPM.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    write_pnm(path, width, height, rgb, PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
}

/// Binary (P5) 8-bit PGM.
pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    write_pnm(path, width, height, gray, PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
}

fn read_ppm(path: &Path) -> Result<Tensor> {
    let img = image::ImageReader::open(path)?.with_guessed_format()?.decode()?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    Ok(Tensor::from_fn([CHANNELS, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * CHANNELS + c] as f64 / 255.0
    }))
}

fn read_pgm(path: &Path) -> Result<LabelMap> {
    let img = image::ImageReader::open(path)?.with_guessed_format()?.decode()?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    LabelMap::new(h, w, img.into_raw())
}

fn sha256_files(paths: &[&Path]) -> Result<String> {
    let mut hasher = Sha256::new();
    for p in paths {
        hasher.update(fs::read(p)?);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Dataset-level facts stored in the manifest header.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetInfo {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

/// Writes `images/*.ppm`, `labels/*.pgm` (raw class ids) and `manifest.txt`.
/// Returns the written file paths relative to `dir`.
pub fn export_dataset(dir: &Path, split: &DatasetSplit, data: &DataConfig) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("labels"))?;
    let mut manifest = format!(
        "{MANIFEST_MAGIC}\nnum_classes {}\nheight {}\nwidth {}\nseed {}\n",
        data.num_classes, data.height, data.width, split.seed
    );
    let mut files = Vec::new();
    let mut rows: Vec<(&SegSample, Role)> = split.samples_with_roles().collect();
    rows.sort_by_key(|(s, _)| s.id);
    for (s, role) in rows {
        let image_rel = PathBuf::from(format!("images/{:05}.ppm", s.id));
        let label_rel = PathBuf::from(format!("labels/{:05}.pgm", s.id));
        write_ppm(&dir.join(&image_rel), s.width(), s.height(), &image_bytes(&s.image)?)?;
        write_pgm(&dir.join(&label_rel), s.width(), s.height(), s.label.data())?;
        let digest = sha256_files(&[&dir.join(&image_rel), &dir.join(&label_rel)])?;
        let _ = writeln!(manifest, "sample {} {} {} {} {digest}", s.id, role.as_str(), image_rel.display(), label_rel.display());
        files.push(image_rel);
        files.push(label_rel);
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    files.push(PathBuf::from("manifest.txt"));
    Ok(files)
}

/// Reads a directory written by [`export_dataset`], verifying every file
/// against its manifest digest.
pub fn import_dataset(dir: &Path) -> Result<(DatasetSplit, DatasetInfo)> {
    let manifest_path = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_MAGIC) {
        return Err(Error::format(&manifest_path, "not a dataset manifest"));
    }
    let mut header = std::collections::HashMap::new();
    let (mut labeled, mut unlabeled, mut validation) = (Vec::new(), Vec::new(), Vec::new());
    for (n, line) in lines.enumerate() {
        let bad = |what: &str| Error::format(&manifest_path, format!("line {}: {what}", n + 2));
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            [] => {}
            ["sample", id, role, image, label, digest] => {
                let id: usize = id.parse().map_err(|_| bad("bad sample id"))?;
                let role: Role = role.parse().map_err(|_| bad("bad role"))?;
                let (image_path, label_path) = (dir.join(image), dir.join(label));
                if sha256_files(&[&image_path, &label_path]).map_err(|_| bad("missing sample file"))? != *digest {
                    return Err(bad(&format!("digest mismatch for sample {id}")));
                }
                let sample = SegSample { id, image: read_ppm(&image_path)?, label: read_pgm(&label_path)? };
                match role {
                    Role::Labeled => labeled.push(sample),
                    Role::Unlabeled => unlabeled.push(sample),
                    Role::Validation => validation.push(sample),
                }
            }
            [key, value] => {
                header.insert(key.to_string(), value.to_string());
            }
            _ => return Err(bad("unrecognized line")),
        }
    }
    let field = |k: &str| -> Result<u64> {
        header
            .get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format(&manifest_path, format!("missing or bad header `{k}`")))
    };
    let info = DatasetInfo {
        num_classes: field("num_classes")? as usize,
        height: field("height")? as usize,
        width: field("width")? as usize,
        seed: field("seed")?,
    };
    for s in labeled.iter().chain(&unlabeled).chain(&validation) {
        if s.height() != info.height || s.width() != info.width {
            return Err(Error::format(&manifest_path, format!("sample {} has the wrong size", s.id)));
        }
        if s.label.data().iter().any(|&l| l as usize >= info.num_classes) {
            return Err(Error::format(&manifest_path, format!("sample {} has labels beyond num_classes", s.id)));
        }
    }
    if labeled.is_empty() {
        return Err(Error::format(&manifest_path, "no labeled samples"));
    }
    let split = DatasetSplit::from_parts(labeled, unlabeled, validation, info.seed)
        .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    Ok((split, info))
}

/// SHA-256 over relative paths and contents of every file below `dir`,
/// in sorted order, leaving out top-level files named in `skip`.
pub fn directory_digest(dir: &Path, skip: &[&str]) -> Result<String> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                out.push(path.strip_prefix(root).expect("walk stays below root").to_path_buf());
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.retain(|f| !skip.iter().any(|s| f == Path::new(s)));
    files.sort();
    let mut hasher = Sha256::new();
    for f in files {
        hasher.update(f.to_string_lossy().as_bytes());
        hasher.update([0]);
        hasher.update(fs::read(dir.join(&f))?);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Distinct colors for class ids, background dark.
pub fn palette(num_classes: usize) -> Vec<[u8; 3]> {
    (0..num_classes)
        .map(|c| {
            if c == 0 {
                return [32, 32, 32];
            }
            let hue = (c - 1) as f64 / (num_classes - 1).max(1) as f64 * 6.0;
            let x = 1.0 - (hue % 2.0 - 1.0).abs();
            let (r, g, b) = match hue as usize {
                0 => (1.0, x, 0.0),
                1 => (x, 1.0, 0.0),
                2 => (0.0, 1.0, x),
                3 => (0.0, x, 1.0),
                4 => (x, 0.0, 1.0),
                _ => (1.0, 0.0, x),
            };
            [to_byte(r), to_byte(g), to_byte(b)]
        })
        .collect()
}

/// Class colors blended over the input image.
pub fn overlay(image: &Tensor, labels: &LabelMap, num_classes: usize) -> Result<Vec<u8>> {
    let rgb = image_bytes(image)?;
    if rgb.len() != labels.len() * CHANNELS {
        return Err(Error::shape("overlay", "image and labels differ in size"));
    }
    let colors = palette(num_classes.max(labels.data().iter().map(|&l| l as usize + 1).max().unwrap_or(0)));
    Ok(rgb
        .chunks_exact(CHANNELS)
        .zip(labels.data())
        .flat_map(|(px, &l)| {
            let c = colors[l as usize];
            [0, 1, 2].map(|k| ((px[k] as u16 + c[k] as u16 * 3) / 4) as u8)
        })
        .collect())
}

/// Label map scaled to the full gray range for viewing.
pub fn label_gray(labels: &LabelMap, num_classes: usize) -> Vec<u8> {
    let step = 255 / (num_classes.max(2) - 1);
    labels.data().iter().map(|&l| (l as usize * step).min(255) as u8).collect()
}

pub fn mask_gray(mask: &Mask) -> Vec<u8> {
    mask.data().iter().map(|&m| if m { 255 } else { 0 }).collect()
}

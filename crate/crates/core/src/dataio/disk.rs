//! On-disk dataset layout.
//!
//! A dataset directory holds `manifest.json`, `labels.csv`, `masks.csv`,
//! and one binary PGM (1 channel) or PPM (3 channels) file per sample with
//! 16-bit samples. Pixels quantize to 1/65535 steps on write.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, Image, MaskRegion, Sample};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Manifest {
    num_classes: usize,
    height: usize,
    width: usize,
    channels: usize,
    samples: Vec<ManifestSample>,
}

#[derive(Serialize, Deserialize)]
struct ManifestSample {
    id: String,
    label: usize,
}

const MAXVAL: f64 = 65535.0;

fn image_extension(channels: usize) -> Result<&'static str> {
    match channels {
        1 => Ok("pgm"),
        3 => Ok("ppm"),
        c => Err(Error::Data(format!("unsupported channel count {c}"))),
    }
}

fn write_netpbm(path: &Path, image: &Image) -> Result<()> {
    let magic = if image.channels == 1 { "P5" } else { "P6" };
    let mut out = Vec::with_capacity(image.pixels.len() * 2 + 32);
    write!(out, "{magic}\n{} {}\n65535\n", image.width, image.height)?;
    for &p in &image.pixels {
        let q = (p.clamp(0.0, 1.0) * MAXVAL).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

fn read_netpbm(path: &Path, expect_channels: usize) -> Result<(usize, usize, Vec<f64>)> {
    let raw = fs::read(path)?;
    let header_err = || Error::Data(format!("bad netpbm header in {}", path.display()));
    // Parse "P5|P6\n<w> <h>\n<maxval>\n" then raw big-endian u16 samples.
    let mut fields = Vec::new();
    let mut pos = 0usize;
    while fields.len() < 4 && pos < raw.len() {
        while pos < raw.len() && raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&raw[start..pos]).map_err(|_| header_err())?);
    }
    if fields.len() < 4 {
        return Err(header_err());
    }
    let channels = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(header_err()),
    };
    if channels != expect_channels {
        return Err(Error::Data(format!(
            "expected {expect_channels} channels, file has {channels}"
        )));
    }
    let width: usize = fields[1].parse().map_err(|_| header_err())?;
    let height: usize = fields[2].parse().map_err(|_| header_err())?;
    let maxval: f64 = fields[3].parse().map_err(|_| header_err())?;
    pos += 1; // single whitespace after maxval
    let need = width * height * channels * 2;
    if raw.len() < pos + need {
        return Err(Error::Data(format!("truncated image {}", path.display())));
    }
    let pixels: Vec<f64> = raw[pos..pos + need]
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / maxval)
        .collect();
    Ok((height, width, pixels))
}

pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let ext = image_extension(dataset.channels)?;

    let manifest = Manifest {
        num_classes: dataset.num_classes,
        height: dataset.height,
        width: dataset.width,
        channels: dataset.channels,
        samples: dataset
            .ids
            .iter()
            .zip(dataset.samples.iter())
            .map(|(id, s)| ManifestSample {
                id: id.clone(),
                label: s.y,
            })
            .collect(),
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;

    let mut labels = String::from("sample_id,class\n");
    let mut masks = String::from("sample_id,row0,col0,row1,col1\n");
    for (id, s) in dataset.ids.iter().zip(dataset.samples.iter()) {
        labels.push_str(&format!("{id},{}\n", s.y));
        for r in &s.x.mask_regions {
            masks.push_str(&format!("{id},{},{},{},{}\n", r.row0, r.col0, r.row1, r.col1));
        }
        write_netpbm(&dir.join(format!("{id}.{ext}")), &s.x)?;
    }
    fs::write(dir.join("labels.csv"), labels)?;
    fs::write(dir.join("masks.csv"), masks)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let ext = image_extension(manifest.channels)?;

    let mut masks_by_id: std::collections::BTreeMap<String, Vec<MaskRegion>> = Default::default();
    let masks_raw = fs::read_to_string(dir.join("masks.csv"))?;
    for line in masks_raw.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(Error::Data(format!("bad masks.csv line: {line}")));
        }
        let parse = |s: &str| -> Result<usize> {
            s.trim()
                .parse()
                .map_err(|_| Error::Data(format!("bad masks.csv line: {line}")))
        };
        masks_by_id.entry(parts[0].to_string()).or_default().push(MaskRegion {
            row0: parse(parts[1])?,
            col0: parse(parts[2])?,
            row1: parse(parts[3])?,
            col1: parse(parts[4])?,
        });
    }

    let mut ids = Vec::with_capacity(manifest.samples.len());
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let (h, w, pixels) = read_netpbm(&dir.join(format!("{}.{ext}", entry.id)), manifest.channels)?;
        if h != manifest.height || w != manifest.width {
            return Err(Error::Data(format!(
                "image {} is {h}x{w}, manifest says {}x{}",
                entry.id, manifest.height, manifest.width
            )));
        }
        let regions = masks_by_id.get(&entry.id).cloned().unwrap_or_default();
        let image = Image::new(h, w, manifest.channels, pixels, regions)?;
        ids.push(entry.id.clone());
        samples.push(Sample {
            x: image,
            z: None,
            y: entry.label,
        });
    }
    Ok(Dataset {
        num_classes: manifest.num_classes,
        height: manifest.height,
        width: manifest.width,
        channels: manifest.channels,
        ids,
        samples,
    })
}

/// Write `partition.csv` mapping sample ids to client ids.
pub fn write_partition_csv(path: &Path, ids: &[String], assignment: &[usize]) -> Result<()> {
    if ids.len() != assignment.len() {
        return Err(Error::invalid("id/assignment length mismatch"));
    }
    let mut out = String::from("sample_id,client_id\n");
    for (id, &client) in ids.iter().zip(assignment.iter()) {
        out.push_str(&format!("{id},{client}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

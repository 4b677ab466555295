//! On-disk dataset layout: `images/NNNNNN.png`, `labels.csv` and `manifest.json`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use autograd::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{generate, Dataset, Domain, DomainShift, RenderConfig, SkeletonSpec};
use crate::error::{Error, Result};
use crate::heatmap_codec::KeypointSet;

pub const LABEL_HEADER: &str = "sample_id,joint_id,x,y,visible";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SkeletonSpec,
    pub shift: DomainShift,
    pub render: RenderConfig,
    pub domain: Domain,
    pub seed: u64,
    pub count: usize,
    /// Digest over `labels.csv` followed by every PNG in sample order.
    pub sha256: String,
}

fn image_name(id: usize) -> String {
    format!("{id:06}.png")
}

fn encode_png(image: &Tensor) -> Vec<u8> {
    let (_, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let plane = h * w;
    let mut rgb = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            rgb.push((image.data()[c * plane + i] * 255.0).round() as u8);
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().expect("in-memory PNG header");
        writer.write_image_data(&rgb).expect("in-memory PNG data");
    }
    out
}

fn decode_png(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = png::Decoder::new(file).read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(path, "expected 8-bit RGB"));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            data[c * plane + i] = buf[3 * i + c] as f64 / 255.0;
        }
    }
    Ok(Tensor::from_vec([3, h, w], data))
}

fn labels_csv(keypoints: &[KeypointSet]) -> String {
    let mut s = String::from(LABEL_HEADER);
    s.push('\n');
    for (id, kp) in keypoints.iter().enumerate() {
        for (j, (c, v)) in kp.coords().iter().zip(kp.visible()).enumerate() {
            s.push_str(&format!("{id},{j},{},{},{}\n", c[0], c[1], u8::from(*v)));
        }
    }
    s
}

/// Generates `n` samples and writes them under `out_dir`.
pub fn generate_dataset(
    spec: &SkeletonSpec,
    shift: &DomainShift,
    render: &RenderConfig,
    domain: Domain,
    n: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Manifest> {
    let data = generate(spec, shift, render, domain, n, seed)?;
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;

    let per = data.images.len() / n;
    let pngs: Vec<Vec<u8>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let img = Tensor::from_vec(data.images.shape()[1..].to_vec(), data.images.data()[i * per..(i + 1) * per].to_vec());
            encode_png(&img)
        })
        .collect();
    let csv = labels_csv(&data.keypoints);

    let mut hasher = Sha256::new();
    hasher.update(csv.as_bytes());
    for (i, bytes) in pngs.iter().enumerate() {
        let path = images_dir.join(image_name(i));
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        hasher.update(bytes);
    }
    let labels = out_dir.join("labels.csv");
    fs::write(&labels, &csv).map_err(|e| Error::io(&labels, e))?;

    let manifest = Manifest {
        spec: spec.clone(),
        shift: shift.clone(),
        render: render.clone(),
        domain,
        seed,
        count: n,
        sha256: hex::encode(hasher.finalize()),
    };
    let path = out_dir.join("manifest.json");
    let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn parse_labels(path: &Path, text: &str, count: usize) -> Result<Vec<KeypointSet>> {
    let mut lines = text.lines();
    if lines.next() != Some(LABEL_HEADER) {
        return Err(Error::format(path, format!("expected header `{LABEL_HEADER}`")));
    }
    let mut rows: Vec<Vec<([f64; 2], bool)>> = vec![Vec::new(); count];
    for (n, line) in lines.enumerate() {
        let bad = |m: &str| Error::format(path, format!("line {}: {m}", n + 2));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad("expected 5 fields"));
        }
        let id: usize = f[0].parse().map_err(|_| bad("bad sample_id"))?;
        let joint: usize = f[1].parse().map_err(|_| bad("bad joint_id"))?;
        let x: f64 = f[2].parse().map_err(|_| bad("bad x"))?;
        let y: f64 = f[3].parse().map_err(|_| bad("bad y"))?;
        let vis = match f[4] {
            "1" => true,
            "0" => false,
            _ => return Err(bad("visible must be 0 or 1")),
        };
        let row = rows.get_mut(id).ok_or_else(|| bad("sample_id beyond the manifest count"))?;
        if row.len() != joint {
            return Err(bad("joint rows out of order"));
        }
        row.push(([x, y], vis));
    }
    rows.into_iter()
        .map(|r| {
            let (coords, vis): (Vec<[f64; 2]>, Vec<bool>) = r.into_iter().unzip();
            KeypointSet::new(coords, vis)
        })
        .collect()
}

/// Reads a dataset written by [`generate_dataset`], verifying its checksum.
pub fn load_dataset(dir: &Path) -> Result<(Dataset, Manifest)> {
    let mpath = dir.join("manifest.json");
    let manifest: Manifest =
        serde_json::from_slice(&fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?).map_err(|e| Error::format(&mpath, e.to_string()))?;
    let lpath = dir.join("labels.csv");
    let csv = fs::read_to_string(&lpath).map_err(|e| Error::io(&lpath, e))?;
    let keypoints = parse_labels(&lpath, &csv, manifest.count)?;

    let mut hasher = Sha256::new();
    hasher.update(csv.as_bytes());
    let mut images = Vec::with_capacity(manifest.count);
    for i in 0..manifest.count {
        let p = dir.join("images").join(image_name(i));
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        hasher.update(&bytes);
        images.push(decode_png(&p)?);
    }
    if hex::encode(hasher.finalize()) != manifest.sha256 {
        return Err(Error::format(dir, "checksum does not match the manifest"));
    }
    if images.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let data = Dataset { images: Tensor::stack(&images), keypoints, domain: manifest.domain };
    Ok((data, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_matches_in_memory_generation() {
        let dir = tempfile::tempdir().unwrap();
        let (spec, shift, render) = (SkeletonSpec::default(), DomainShift::target(), RenderConfig::default());
        let m = generate_dataset(&spec, &shift, &render, Domain::Target, 6, 21, dir.path()).unwrap();
        assert_eq!(m.count, 6);
        assert_eq!(fs::read_dir(dir.path().join("images")).unwrap().count(), 6);
        let (loaded, m2) = load_dataset(dir.path()).unwrap();
        assert_eq!(m, m2);
        let direct = generate(&spec, &shift, &render, Domain::Target, 6, 21).unwrap();
        assert_eq!(loaded, direct);
    }

    #[test]
    fn same_seed_gives_the_same_checksum() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let args = (SkeletonSpec::default(), DomainShift::source(), RenderConfig::default());
        let ma = generate_dataset(&args.0, &args.1, &args.2, Domain::Source, 4, 5, a.path()).unwrap();
        let mb = generate_dataset(&args.0, &args.1, &args.2, Domain::Source, 4, 5, b.path()).unwrap();
        assert_eq!(ma.sha256, mb.sha256);
        let mc = generate_dataset(&args.0, &args.1, &args.2, Domain::Source, 4, 6, b.path()).unwrap();
        assert_ne!(ma.sha256, mc.sha256);
    }

    #[test]
    fn tampered_files_fail_the_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let args = (SkeletonSpec::default(), DomainShift::source(), RenderConfig::default());
        generate_dataset(&args.0, &args.1, &args.2, Domain::Source, 2, 5, dir.path()).unwrap();
        let labels = dir.path().join("labels.csv");
        let text = fs::read_to_string(&labels).unwrap().replacen(",1\n", ",0\n", 1);
        fs::write(&labels, text).unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }
}

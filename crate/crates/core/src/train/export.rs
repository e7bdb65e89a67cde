//! Per-frame mask images: binary PGM (`P5`), pixel value = slot id.

use super::TrainError;
use crate::metrics::LabelField;
use std::path::{Path, PathBuf};

pub const MANIFEST_NAME: &str = "manifest.txt";

fn io_err(path: &Path, e: std::io::Error) -> TrainError {
    TrainError::Io(format!("{}: {e}", path.display()))
}

pub fn write_pgm(path: &Path, w: usize, h: usize, pixels: &[u8]) -> Result<(), TrainError> {
    assert_eq!(pixels.len(), w * h);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// Returns `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>), TrainError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let bad = |m: &str| TrainError::Io(format!("{}: {m}", path.display()));
    // Header: magic, width, height, maxval, separated by single whitespace.
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("bad header"))?);
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("expected an 8-bit P5 image"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let data = bytes.get(pos..).filter(|d| d.len() == w * h).ok_or_else(|| bad("payload size"))?;
    Ok((w, h, data.to_vec()))
}

/// Writes `video{v:04}_frame{t:02}.pgm` for every frame of every prediction
/// plus a manifest listing `video frame file` per line.
pub fn export_masks(dir: &Path, preds: &[LabelField]) -> Result<Vec<PathBuf>, TrainError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut manifest = String::new();
    let mut written = Vec::new();
    for (v, field) in preds.iter().enumerate() {
        for t in 0..field.t {
            let name = format!("video{v:04}_frame{t:02}.pgm");
            let pixels = field
                .frame(t)
                .iter()
                .map(|&l| u8::try_from(l).map_err(|_| TrainError::Mismatch(format!("label {l} exceeds 255"))))
                .collect::<Result<Vec<_>, _>>()?;
            let path = dir.join(&name);
            write_pgm(&path, field.w, field.h, &pixels)?;
            manifest.push_str(&format!("{v} {t} {name}\n"));
            written.push(path);
        }
    }
    let mpath = dir.join(MANIFEST_NAME);
    std::fs::write(&mpath, manifest).map_err(|e| io_err(&mpath, e))?;
    Ok(written)
}

/// Reassembles per-video label fields from an exported directory.
pub fn read_manifest(dir: &Path) -> Result<Vec<LabelField>, TrainError> {
    let mpath = dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&mpath).map_err(|e| io_err(&mpath, e))?;
    let mut videos: Vec<Vec<(usize, usize, Vec<u8>)>> = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let bad = || TrainError::Io(format!("{}: bad line {line:?}", mpath.display()));
        let [v, t, name] = parts[..] else { return Err(bad()) };
        let (v, t): (usize, usize) = (v.parse().map_err(|_| bad())?, t.parse().map_err(|_| bad())?);
        if v > videos.len() || (v == videos.len()) != (t == 0) || (v < videos.len() && videos[v].len() != t) {
            return Err(bad());
        }
        if v == videos.len() {
            videos.push(Vec::new());
        }
        videos[v].push(read_pgm(&dir.join(name))?);
    }
    Ok(videos
        .into_iter()
        .map(|frames| {
            let (w, h) = (frames[0].0, frames[0].1);
            let labels = frames.iter().flat_map(|f| f.2.iter().map(|&p| p as u32)).collect();
            LabelField::new(frames.len(), h, w, labels)
        })
        .collect())
}

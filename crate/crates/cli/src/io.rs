use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use meae_core::signal::{format_csv, load_recording, write_atomic, Recording};

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes()).with_context(|| format!("cannot write {}", path.display()))
}

pub fn write_signal(path: &Path, samples: &[f64], fs: f64) -> Result<()> {
    write_text(path, &format_csv(samples, fs))
}

pub fn read_recording(path: &Path) -> Result<Recording> {
    load_recording(path).with_context(|| format!("cannot load recording {}", path.display()))
}

pub const SCENE_FILE: &str = "scene.toml";
pub const MIXTURE_FILE: &str = "mixture.csv";
pub const BEATS_FILE: &str = "beats.csv";

pub fn is_scene(dir: &Path) -> bool {
    dir.join(SCENE_FILE).is_file()
}

fn is_recording(path: &Path) -> bool {
    path.is_file()
        && path.extension().is_some_and(|e| e == "csv" || e == "sig")
        && path.file_name().is_some_and(|n| n != BEATS_FILE)
}

/// Recordings under `dir`: a scene contributes its mixture only, other files are taken as-is.
pub fn collect_recordings(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        bail!("data directory {} does not exist", dir.display());
    }
    if is_scene(dir) {
        return Ok(vec![dir.join(MIXTURE_FILE)]);
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("cannot list {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    Ok(entries
        .into_iter()
        .filter_map(|p| {
            if p.is_dir() && is_scene(&p) {
                Some(p.join(MIXTURE_FILE))
            } else if is_recording(&p) {
                Some(p)
            } else {
                None
            }
        })
        .collect())
}

/// Scene directories at or directly below `dir`.
pub fn collect_scenes(dir: &Path) -> Result<Vec<PathBuf>> {
    if is_scene(dir) {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut scenes: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("cannot list {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.is_dir() && is_scene(p))
        .collect();
    scenes.sort();
    Ok(scenes)
}

/// Reads the `r_peak` column of a beat file, or the only column of a headerless one.
pub fn read_r_peaks(path: &Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, first)) = lines.next() else {
        bail!("{} is empty", path.display());
    };
    let header: Vec<&str> = first.split(',').map(str::trim).collect();
    let (column, rows): (usize, Vec<(usize, &str)>) = match header.iter().position(|h| *h == "r_peak") {
        Some(c) => (c, lines.collect()),
        None => (0, std::iter::once((0, first)).chain(lines).collect()),
    };
    let mut peaks = Vec::new();
    for (i, line) in rows {
        let cell = line.split(',').nth(column).map(str::trim).unwrap_or("");
        if cell.is_empty() {
            continue;
        }
        let v: usize = cell
            .parse()
            .with_context(|| format!("{}:{}: not a sample index: {cell:?}", path.display(), i + 1))?;
        peaks.push(v);
    }
    if peaks.windows(2).any(|w| w[1] <= w[0]) {
        bail!("{}: R-peaks must be strictly increasing", path.display());
    }
    Ok(peaks)
}

/// Stem of a file name, used as recording id and output label.
pub fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

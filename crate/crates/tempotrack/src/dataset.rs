//! On-disk sequence layout: `visible/` + `infrared/` PNG frames paired by
//! sorted filename, `groundtruth.txt` with one `x,y,w,h` line per frame, and
//! an optional `attributes.txt` tagging frame spans.

use std::path::{Path, PathBuf};

use crate::boxes::BBox;
use crate::error::{ModelError, Result};
use crate::imageio::RgbImage;

/// The 19 challenge-attribute codes used for per-attribute evaluation.
pub const ATTRIBUTE_CODES: [&str; 19] = [
    "NO", "PO", "TO", "HO", "MB", "LI", "HI", "AIV", "LR", "DEF", "BC", "SA", "CM", "TC", "FL",
    "OV", "FM", "SV", "ARC",
];

/// A tagged frame span `[start, end)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttributeSpan {
    pub tag: String,
    pub start: usize,
    pub end: usize,
}

impl AttributeSpan {
    pub fn contains(&self, frame: usize) -> bool {
        (self.start..self.end).contains(&frame)
    }
}

#[derive(Clone, Debug)]
pub struct SequenceMeta {
    pub name: String,
    pub rgb_dir: PathBuf,
    pub tir_dir: PathBuf,
    pub groundtruth: PathBuf,
    pub attributes: Vec<AttributeSpan>,
    pub frame_files: Vec<(PathBuf, PathBuf)>,
    pub boxes: Vec<BBox>,
}

impl SequenceMeta {
    pub fn len(&self) -> usize {
        self.frame_files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_files.is_empty()
    }

    pub fn frames_with_attribute(&self, tag: &str) -> Vec<usize> {
        (0..self.len())
            .filter(|&f| self.attributes.iter().any(|s| s.tag == tag && s.contains(f)))
            .collect()
    }
}

/// Parse one `x,y,w,h` ground-truth line (top-left origin, pixels).
pub fn parse_groundtruth_line(line: &str) -> std::result::Result<BBox, String> {
    let parts: Vec<&str> = line.trim().split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(format!("expected 4 comma-separated fields, got {}", parts.len()));
    }
    let mut vals = [0f64; 4];
    for (i, p) in parts.iter().enumerate() {
        vals[i] = p
            .parse::<f64>()
            .map_err(|e| format!("field {} ('{}'): {}", i + 1, p, e))?;
        if !vals[i].is_finite() {
            return Err(format!("field {} is not finite", i + 1));
        }
    }
    Ok(BBox::from_xywh(vals[0], vals[1], vals[2], vals[3]))
}

pub fn parse_groundtruth(text: &str) -> std::result::Result<Vec<BBox>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_groundtruth_line(l).map_err(|e| format!("line {}: {}", i + 1, e)))
        .collect()
}

/// Parse an attribute sidecar: `TAG start end` per line, `#` comments.
pub fn parse_attributes(text: &str) -> std::result::Result<Vec<AttributeSpan>, String> {
    let mut spans = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(format!("line {}: expected 'TAG start end'", i + 1));
        }
        let start: usize = parts[1]
            .parse()
            .map_err(|e| format!("line {}: bad start: {}", i + 1, e))?;
        let end: usize = parts[2]
            .parse()
            .map_err(|e| format!("line {}: bad end: {}", i + 1, e))?;
        if start >= end {
            return Err(format!("line {}: empty span {}..{}", i + 1, start, end));
        }
        spans.push(AttributeSpan {
            tag: parts[0].to_string(),
            start,
            end,
        });
    }
    Ok(spans)
}

fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| ModelError::io(dir.display().to_string(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    files.sort();
    Ok(files)
}

/// Validate the directory layout and pair frames by sorted filename.
pub fn load_sequence(dir: &Path) -> Result<SequenceMeta> {
    let rgb_dir = dir.join("visible");
    let tir_dir = dir.join("infrared");
    let gt_path = dir.join("groundtruth.txt");
    for required in [&rgb_dir, &tir_dir] {
        if !required.is_dir() {
            return Err(ModelError::load(
                dir.display().to_string(),
                format!("missing directory {}", required.display()),
            ));
        }
    }
    let rgb_files = sorted_pngs(&rgb_dir)?;
    let tir_files = sorted_pngs(&tir_dir)?;
    if rgb_files.len() != tir_files.len() {
        return Err(ModelError::load(
            dir.display().to_string(),
            format!(
                "frame count mismatch: {} visible vs {} infrared",
                rgb_files.len(),
                tir_files.len()
            ),
        ));
    }
    for (r, t) in rgb_files.iter().zip(&tir_files) {
        if r.file_name() != t.file_name() {
            return Err(ModelError::load(
                dir.display().to_string(),
                format!(
                    "unpaired frame: visible {:?} vs infrared {:?}",
                    r.file_name().unwrap_or_default(),
                    t.file_name().unwrap_or_default()
                ),
            ));
        }
    }
    let gt_text = std::fs::read_to_string(&gt_path)
        .map_err(|e| ModelError::io(gt_path.display().to_string(), e))?;
    let boxes = parse_groundtruth(&gt_text)
        .map_err(|e| ModelError::load(gt_path.display().to_string(), e))?;
    if boxes.len() != rgb_files.len() {
        return Err(ModelError::load(
            gt_path.display().to_string(),
            format!("{} ground-truth lines for {} frames", boxes.len(), rgb_files.len()),
        ));
    }
    let attr_path = dir.join("attributes.txt");
    let attributes = if attr_path.exists() {
        let text = std::fs::read_to_string(&attr_path)
            .map_err(|e| ModelError::io(attr_path.display().to_string(), e))?;
        parse_attributes(&text).map_err(|e| ModelError::load(attr_path.display().to_string(), e))?
    } else {
        Vec::new()
    };
    Ok(SequenceMeta {
        name: dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "sequence".into()),
        rgb_dir,
        tir_dir,
        groundtruth: gt_path,
        attributes,
        frame_files: rgb_files.into_iter().zip(tir_files).collect(),
        boxes,
    })
}

/// A sequence with every frame decoded into memory.
pub struct LoadedSequence {
    pub meta: SequenceMeta,
    pub frames: Vec<(RgbImage, RgbImage)>,
}

impl LoadedSequence {
    pub fn load(dir: &Path) -> Result<Self> {
        let meta = load_sequence(dir)?;
        let mut frames = Vec::with_capacity(meta.len());
        for (rgb, tir) in &meta.frame_files {
            frames.push((RgbImage::load_png(rgb)?, RgbImage::load_png(tir)?));
        }
        Ok(LoadedSequence { meta, frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// All sequence directories directly under `root`, sorted by name.
pub fn list_sequence_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| ModelError::io(root.display().to_string(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join("groundtruth.txt").exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(ModelError::load(
            root.display().to_string(),
            "no sequence directories found",
        ));
    }
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groundtruth_format() {
        let b = parse_groundtruth_line("10,20,30,40").unwrap();
        assert_eq!(b.to_xywh(), (10.0, 20.0, 30.0, 40.0));
        assert!(parse_groundtruth_line("1,2,3").is_err());
        assert!(parse_groundtruth_line("a,b,c,d").is_err());
        assert!(parse_groundtruth_line("1,2,3,inf").is_err());
    }

    #[test]
    fn groundtruth_errors_name_the_line() {
        let err = parse_groundtruth("1,2,3,4\n5,6,oops,8\n").unwrap_err();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn attributes_parse_and_span_check() {
        let spans = parse_attributes("# comment\nLI 10 20\nDEF 15 40\n").unwrap();
        assert_eq!(spans.len(), 2);
        assert!(spans[0].contains(10));
        assert!(!spans[0].contains(20));
        assert!(parse_attributes("LI 20 10").is_err());
        assert!(parse_attributes("LI 5").is_err());
    }

    #[test]
    fn missing_tir_frame_is_reported() {
        let dir = std::env::temp_dir().join("tempotrack_ds_missing_tir");
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(dir.join("visible")).unwrap();
        std::fs::create_dir_all(dir.join("infrared")).unwrap();
        let img = RgbImage::new(8, 8);
        img.save_png(&dir.join("visible/000.png")).unwrap();
        img.save_png(&dir.join("visible/001.png")).unwrap();
        img.save_png(&dir.join("infrared/000.png")).unwrap();
        std::fs::write(dir.join("groundtruth.txt"), "1,1,2,2\n1,1,2,2\n").unwrap();
        let err = load_sequence(&dir).unwrap_err().to_string();
        assert!(err.contains("mismatch"), "{err}");
    }

    #[test]
    fn three_frame_fixture_round_trips() {
        let dir = std::env::temp_dir().join("tempotrack_ds_fixture");
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(dir.join("visible")).unwrap();
        std::fs::create_dir_all(dir.join("infrared")).unwrap();
        for i in 0..3 {
            let img = RgbImage::filled(10, 8, [i as u8 * 40, 0, 0]);
            img.save_png(&dir.join(format!("visible/{i:03}.png"))).unwrap();
            img.save_png(&dir.join(format!("infrared/{i:03}.png"))).unwrap();
        }
        std::fs::write(dir.join("groundtruth.txt"), "1,2,3,4\n2,3,4,5\n3,4,5,6\n").unwrap();
        std::fs::write(dir.join("attributes.txt"), "LI 0 2\n").unwrap();
        let seq = LoadedSequence::load(&dir).unwrap();
        assert_eq!(seq.len(), 3);
        assert_eq!(seq.meta.boxes[1].to_xywh(), (2.0, 3.0, 4.0, 5.0));
        assert_eq!(seq.meta.frames_with_attribute("LI"), vec![0, 1]);
        assert_eq!(seq.frames[2].0.get(0, 0), [80, 0, 0]);
    }
}

//! Building a dataset from a directory of BVH files.
//!
//! Labels come from file names: `<content>_<style>[_anything].bvh`. A stem
//! without an underscore gets the style `neutral`. Label indices follow the
//! sorted order of the names.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::error::{ensure, Error, Result};

use super::bvh::parse_bvh;
use super::dataset::{window_and_normalize, Dataset, DatasetMeta};
use super::kinematics::{mean_root_speed, ContactThresholds, WorldMotion};
use super::WINDOW;

pub const DEFAULT_STYLE: &str = "neutral";

/// `(content, style)` names encoded in a file stem.
pub fn labels_from_stem(stem: &str) -> (String, String) {
    let mut parts = stem.split('_').filter(|s| !s.is_empty());
    let content = parts.next().unwrap_or(stem).to_lowercase();
    let style = parts.next().map_or(DEFAULT_STYLE.to_string(), |s| s.to_lowercase());
    (content, style)
}

/// `.bvh` files directly inside `dir`, sorted by name.
pub fn list_bvh_files(dir: &Path) -> Result<Vec<PathBuf>> {
    ensure!(dir.is_dir(), Error::Data(format!("input directory '{}' does not exist", dir.display())));
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("bvh")))
        .collect();
    files.sort();
    ensure!(!files.is_empty(), Error::Data(format!("no .bvh files in '{}'", dir.display())));
    Ok(files)
}

/// Parses, windows and normalizes every file. All files must share one
/// skeleton and frame time. Thresholds are calibrated from the data unless
/// given.
pub fn dataset_from_bvh(files: &[PathBuf], stride: usize, thresholds: Option<ContactThresholds>) -> Result<Dataset> {
    ensure!(!files.is_empty(), Error::Data("no input files".into()));
    let mut parsed = Vec::with_capacity(files.len());
    for f in files {
        let text = std::fs::read_to_string(f)?;
        let bvh = parse_bvh(&text).map_err(|e| Error::Data(format!("{}: {e}", f.display())))?;
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        parsed.push((bvh, labels_from_stem(stem)));
    }
    let first = &parsed[0].0;
    for (b, _) in &parsed[1..] {
        ensure!(
            b.skeleton.joint_names == first.skeleton.joint_names && b.skeleton.parent_index == first.skeleton.parent_index,
            Error::Data("input files use different skeletons".into())
        );
        ensure!(
            (b.frame_time - first.frame_time).abs() <= 1e-9,
            Error::Data("input files use different frame times".into())
        );
    }
    let contents: Vec<String> = parsed.iter().map(|(_, l)| l.0.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let styles: Vec<String> = parsed.iter().map(|(_, l)| l.1.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let mut motions: Vec<(WorldMotion, usize, usize)> = Vec::new();
    for (b, (c, s)) in &parsed {
        ensure!(
            b.num_frames() >= WINDOW,
            Error::Data(format!("a '{c}_{s}' file has {} frames, need at least {WINDOW}", b.num_frames()))
        );
        let ci = contents.iter().position(|x| x == c).unwrap();
        let si = styles.iter().position(|x| x == s).unwrap();
        motions.push((b.to_world(), ci, si));
    }
    let skeleton = first.skeleton.clone();
    let frame_time = first.frame_time;
    let thresholds = thresholds.unwrap_or_else(|| {
        let ms: Vec<WorldMotion> = motions.iter().map(|(m, _, _)| m.clone()).collect();
        ContactThresholds::calibrated(&skeleton, mean_root_speed(&ms, frame_time))
    });
    let (clips, stats) = window_and_normalize(&motions, &skeleton, frame_time, stride, thresholds, None)?;
    let ds = Dataset {
        clips,
        meta: DatasetMeta { content_names: contents, style_names: styles, stats, skeleton, frame_time, thresholds },
    };
    ds.validate()?;
    Ok(ds)
}

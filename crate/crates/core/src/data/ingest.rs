//! Directory ingestion for the market-style layout convention.
//!
//! Layout on disk:
//!   <root>/bounding_box_train/  -> train split
//!   <root>/query/               -> query split
//!   <root>/bounding_box_test/   -> gallery split
//!
//! Filenames follow `<pid>_c<cam>...` (for example `0002_c1s1_000451_03.jpg`),
//! where pid −1 marks junk and pid 0 marks distractors. The CUHK03 new
//! protocol is consumed in the same materialized form.

use super::{Dataset, PersonImageRecord};
use crate::types::Split;
use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    MarketStyle,
    Cuhk03Style,
    Synthetic,
}

impl std::str::FromStr for Layout {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "market_style" => Ok(Layout::MarketStyle),
            "cuhk03_style" => Ok(Layout::Cuhk03Style),
            "synthetic" => Ok(Layout::Synthetic),
            other => bail!("unknown dataset layout: {other:?}"),
        }
    }
}

/// Parse `<pid>_c<cam>...` from a filename. Returns (person_id, camera_id).
pub fn parse_person_filename(name: &str) -> Result<(i32, u32)> {
    let stem = name.rsplit_once('.').map(|(s, _)| s).unwrap_or(name);
    let mut parts = stem.split('_');
    let pid_part = parts.next().context("empty filename")?;
    let pid: i32 = pid_part
        .parse()
        .with_context(|| format!("bad person id {pid_part:?} in {name:?}"))?;
    let cam_part = parts
        .next()
        .with_context(|| format!("missing camera field in {name:?}"))?;
    let digits: String = cam_part
        .strip_prefix('c')
        .with_context(|| format!("camera field {cam_part:?} must start with 'c' in {name:?}"))?
        .chars()
        .take_while(|c| c.is_ascii_digit())
        .collect();
    ensure!(!digits.is_empty(), "no camera digits in {name:?}");
    Ok((pid, digits.parse()?))
}

fn split_dir(split: Split) -> &'static str {
    match split {
        Split::Train => "bounding_box_train",
        Split::Query => "query",
        Split::Gallery => "bounding_box_test",
    }
}

/// Walk a dataset root and parse every image record.
pub fn ingest_dataset(root: &Path, layout: Layout) -> Result<Dataset> {
    ensure!(root.is_dir(), "dataset root {root:?} does not exist");
    ensure!(
        layout != Layout::Synthetic,
        "the synthetic layout is generated, not ingested from disk"
    );
    let mut records = Vec::new();
    let mut bad_files = Vec::new();
    for split in [Split::Train, Split::Query, Split::Gallery] {
        let dir = root.join(split_dir(split));
        ensure!(dir.is_dir(), "missing split directory {dir:?}");
        let mut count = 0usize;
        for entry in walkdir::WalkDir::new(&dir).min_depth(1).sort_by_file_name() {
            let entry = entry?;
            if !entry.file_type().is_file() {
                continue;
            }
            let name = entry.file_name().to_string_lossy().into_owned();
            let ext = name.rsplit_once('.').map(|(_, e)| e.to_ascii_lowercase());
            if !matches!(ext.as_deref(), Some("jpg" | "jpeg" | "png")) {
                continue;
            }
            match parse_person_filename(&name) {
                Ok((person_id, camera_id)) => {
                    records.push(PersonImageRecord {
                        path: entry.into_path(),
                        person_id,
                        camera_id,
                        split,
                    });
                    count += 1;
                }
                Err(e) => bad_files.push(format!("{}: {e}", entry.path().display())),
            }
        }
        ensure!(count > 0, "empty split {split} under {dir:?}");
    }
    if !bad_files.is_empty() {
        bail!(
            "unparseable filenames in {root:?}:\n  {}",
            bad_files.join("\n  ")
        );
    }
    Ok(Dataset { layout, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    #[test]
    fn parses_market_filenames() {
        assert_eq!(parse_person_filename("0002_c1s1_000451_03.jpg").unwrap(), (2, 1));
        assert_eq!(parse_person_filename("-1_c3s2_000100_00.jpg").unwrap(), (-1, 3));
        assert_eq!(parse_person_filename("0000_c6s3_077419_05.jpg").unwrap(), (0, 6));
        // Duke-style camera field without the sequence part.
        assert_eq!(parse_person_filename("0001_c2_f0046182.jpg").unwrap(), (1, 2));
        assert!(parse_person_filename("notaname.jpg").is_err());
        assert!(parse_person_filename("12_x3.jpg").is_err());
    }

    fn write_stub(dir: &Path, name: &str) {
        fs::create_dir_all(dir).unwrap();
        // Minimal 1x1 PNG via the image crate.
        let img = image::RgbImage::from_pixel(1, 1, image::Rgb([1, 2, 3]));
        img.save(dir.join(name)).unwrap();
    }

    #[test]
    fn ingests_a_market_style_tree() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path();
        write_stub(&root.join("bounding_box_train"), "0002_c1s1_000451_03.png");
        write_stub(&root.join("bounding_box_train"), "0002_c2s1_000500_01.png");
        write_stub(&root.join("bounding_box_train"), "0007_c1s1_000451_03.png");
        write_stub(&root.join("query"), "0002_c1s1_000452_00.png");
        write_stub(&root.join("bounding_box_test"), "0002_c2s1_000453_00.png");
        write_stub(&root.join("bounding_box_test"), "-1_c3s2_000100_00.png");

        let ds = ingest_dataset(root, Layout::MarketStyle).unwrap();
        assert_eq!(ds.split(crate::types::Split::Train).count(), 3);
        assert_eq!(ds.identities(crate::types::Split::Train).len(), 2);
        // Junk excluded from the gallery identity set but kept as a record.
        assert_eq!(ds.split(crate::types::Split::Gallery).count(), 2);
        assert_eq!(ds.identities(crate::types::Split::Gallery).len(), 1);

        let manifest = ds.manifest();
        assert_eq!(manifest.counts[0].images, 3);
        assert_eq!(manifest.checksum.len(), 64);
    }

    #[test]
    fn rejects_empty_split_and_bad_names() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path();
        write_stub(&root.join("bounding_box_train"), "0002_c1s1_000451_03.png");
        // No query/gallery directories at all.
        assert!(ingest_dataset(root, Layout::MarketStyle).is_err());

        write_stub(&root.join("query"), "0002_c1s1_000452_00.png");
        write_stub(&root.join("bounding_box_test"), "0003_c2s1_000453_00.png");
        write_stub(&root.join("bounding_box_test"), "badname.png");
        let err = ingest_dataset(root, Layout::MarketStyle).unwrap_err();
        assert!(format!("{err:#}").contains("badname.png"), "error names the file");
    }

    /// Full-dataset count check; runs only when a real Market-1501 tree is
    /// available via REID_DATA_ROOT.
    #[test]
    fn market1501_counts_match_when_present() {
        let Some(root) = std::env::var_os("REID_DATA_ROOT") else { return };
        let root = Path::new(&root).join("market1501");
        if !root.is_dir() {
            return;
        }
        let ds = ingest_dataset(&root, Layout::MarketStyle).unwrap();
        let train: Vec<_> = ds.split(crate::types::Split::Train).collect();
        assert_eq!(train.len(), 12936);
        assert_eq!(ds.identities(crate::types::Split::Train).len(), 751);
        assert_eq!(ds.split(crate::types::Split::Query).count(), 3368);
        assert_eq!(ds.identities(crate::types::Split::Query).len(), 750);
        assert_eq!(ds.split(crate::types::Split::Gallery).count(), 15013);
    }
}

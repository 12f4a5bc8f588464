//! Training corpora on disk: `rgb/*.ppm`, `depth/*.pgm` and `gt/*.pgm`
//! matched by file stem.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use hodinet_core::train::{synthetic_scene, Batch};

use crate::error::{CliError, Result};
use crate::images;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Triple {
    pub stem: String,
    pub rgb: PathBuf,
    pub depth: PathBuf,
    pub gt: PathBuf,
}

const PARTS: [(&str, &str); 3] = [("rgb", "ppm"), ("depth", "pgm"), ("gt", "pgm")];

/// Files in `dir` with extension `ext`, keyed by stem. A missing
/// directory is treated as empty.
pub fn list(dir: &Path, ext: &str) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(CliError::io(dir, e)),
    };
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_owned(), path);
            }
        }
    }
    Ok(out)
}

/// Complete triples sorted by stem. Any file lacking a partner is an error
/// that names all such files.
pub fn scan(root: &Path) -> Result<Vec<Triple>> {
    let [rgb, depth, gt] = PARTS.map(|(sub, ext)| list(&root.join(sub), ext));
    let (rgb, depth, gt) = (rgb?, depth?, gt?);
    let mut orphans = Vec::new();
    let mut triples = Vec::new();
    let stems: std::collections::BTreeSet<&String> = rgb.keys().chain(depth.keys()).chain(gt.keys()).collect();
    for stem in stems {
        match (rgb.get(stem), depth.get(stem), gt.get(stem)) {
            (Some(r), Some(d), Some(g)) => triples.push(Triple {
                stem: stem.clone(),
                rgb: r.clone(),
                depth: d.clone(),
                gt: g.clone(),
            }),
            found => {
                for p in [found.0, found.1, found.2].into_iter().flatten() {
                    orphans.push(p.display().to_string());
                }
            }
        }
    }
    if !orphans.is_empty() {
        return Err(CliError::Orphans(orphans));
    }
    if triples.is_empty() {
        return Err(CliError::Failed(format!("no training triples under {}", root.display())));
    }
    Ok(triples)
}

/// Loads every triple as a single-image batch at `size`.
pub fn load(triples: &[Triple], size: (usize, usize)) -> Result<Vec<Batch>> {
    triples
        .iter()
        .map(|t| {
            Ok(Batch {
                rgb: images::load_rgb(&t.rgb, Some(size))?.0,
                depth: images::load_depth(&t.depth, Some(size))?,
                gt: images::load_mask(&t.gt, Some(size))?,
            })
        })
        .collect()
}

/// Writes `count` synthetic scenes of side `size` as a corpus under `root`.
pub fn write_synthetic(root: &Path, count: usize, size: usize) -> Result<Vec<Triple>> {
    for (sub, _) in PARTS {
        let dir = root.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    }
    (0..count)
        .map(|i| {
            let scene = synthetic_scene(i, size);
            let stem = format!("scene{i:03}");
            let t = Triple {
                rgb: root.join("rgb").join(format!("{stem}.ppm")),
                depth: root.join("depth").join(format!("{stem}.pgm")),
                gt: root.join("gt").join(format!("{stem}.pgm")),
                stem,
            };
            images::write_image(&t.rgb, &images::to_rgb(&scene.rgb))?;
            images::save_map(&t.depth, &scene.depth)?;
            images::save_map(&t.gt, &scene.gt)?;
            Ok(t)
        })
        .collect()
}

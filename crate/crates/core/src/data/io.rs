use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::render::{IdentitySpec, Landmark, ShapeSpec};
use super::sets::{IdentitySet, Instance};
use crate::engine::Tensor;
use crate::error::{Error, Result};

/// Per-image record in `specs.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub file: String,
    pub shape: ShapeSpec,
    pub landmarks: Vec<Landmark>,
}

/// Contents of `set_<id>/specs.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SetRecord {
    pub identity: IdentitySpec,
    pub instances: Vec<InstanceRecord>,
}

pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `3 x H x W` tensor in `[0, 1]` as 8-bit RGB PNG.
pub fn save_png(t: &Tensor, path: &Path) -> Result<()> {
    let (c, h, w) = t.dims3("save_png")?;
    if c != 3 {
        return Err(Error::Dimension {
            op: "save_png",
            axis: "channels",
            expected: 3,
            got: c,
        });
    }
    let d = t.data();
    let plane = h * w;
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([to_byte(d[i]), to_byte(d[plane + i]), to_byte(d[2 * plane + i])])
    });
    img.save(path).map_err(|e| Error::data(path, e.to_string()))
}

/// Reads any PNG as a `3 x H x W` tensor with values `byte / 255`.
pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::data(path, e.to_string()))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for (x, y, px) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * plane + i] = px.0[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Writes `root/<label>/img_<idx>.png` for every instance, plus `specs.json`
/// when the set carries identity and shape records.
pub fn save_sets(sets: &[IdentitySet], root: &Path) -> Result<()> {
    for set in sets {
        let dir = root.join(&set.label);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut records = Vec::new();
        for (idx, inst) in set.instances.iter().enumerate() {
            let file = format!("img_{idx}.png");
            save_png(&inst.image, &dir.join(&file))?;
            if let Some(shape) = inst.shape {
                let res = inst.image.shape()[2];
                records.push(InstanceRecord {
                    file,
                    shape,
                    landmarks: shape.landmarks(res),
                });
            }
        }
        if let Some(identity) = set.identity {
            if records.len() == set.len() {
                let path = dir.join("specs.json");
                let json = serde_json::to_string_pretty(&SetRecord {
                    identity,
                    instances: records,
                })
                .expect("spec records serialise");
                fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
            }
        }
    }
    Ok(())
}

/// Orders `img_2.png` before `img_10.png`; other names sort lexically after.
fn sort_key(path: &Path) -> (u8, u64, String) {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let numbered = name
        .strip_prefix("img_")
        .and_then(|s| s.strip_suffix(".png"))
        .and_then(|s| s.parse::<u64>().ok());
    match numbered {
        Some(n) => (0, n, name),
        None => (1, 0, name),
    }
}

fn list_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    Ok(out)
}

fn load_specs(dir: &Path, files: &[PathBuf]) -> Result<(Option<IdentitySpec>, Vec<Option<ShapeSpec>>)> {
    let path = dir.join("specs.json");
    if !path.exists() {
        return Ok((None, vec![None; files.len()]));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let record: SetRecord = serde_json::from_str(&text).map_err(|e| Error::data(&path, e.to_string()))?;
    let shapes = files
        .iter()
        .map(|f| {
            let name = f.file_name().map(|n| n.to_string_lossy().into_owned());
            record
                .instances
                .iter()
                .find(|r| Some(&r.file) == name.as_ref())
                .map(|r| r.shape)
        })
        .collect();
    Ok((Some(record.identity), shapes))
}

/// Loads one set per subdirectory of `root`, ordered by directory name.
/// `specs.json` records are attached when present.
pub fn load_image_dirs(root: &Path) -> Result<Vec<IdentitySet>> {
    let mut dirs: Vec<PathBuf> = list_dir(root)?.into_iter().filter(|p| p.is_dir()).collect();
    dirs.sort();
    if dirs.len() < 2 {
        return Err(Error::Config(format!(
            "{} holds {} set directories, need at least 2",
            root.display(),
            dirs.len()
        )));
    }
    let mut size: Option<(usize, usize)> = None;
    let mut sets = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let mut files: Vec<PathBuf> = list_dir(&dir)?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect();
        files.sort_by_key(|p| sort_key(p));
        if files.is_empty() {
            return Err(Error::data(&dir, "no PNG images".to_string()));
        }
        let (identity, shapes) = load_specs(&dir, &files)?;
        let mut instances = Vec::with_capacity(files.len());
        for (file, shape) in files.iter().zip(shapes) {
            let image = load_png(file)?;
            let hw = (image.shape()[1], image.shape()[2]);
            match size {
                None => size = Some(hw),
                Some(s) if s != hw => {
                    return Err(Error::data(
                        file,
                        format!("image is {}x{}, expected {}x{}", hw.0, hw.1, s.0, s.1),
                    ))
                }
                _ => {}
            }
            instances.push(Instance { image, shape });
        }
        let label = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        sets.push(IdentitySet {
            label,
            identity,
            instances,
        });
    }
    Ok(sets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_sets;

    #[test]
    fn round_trip_is_bit_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let sets = generate_sets(3, 12, 32, 21).unwrap();
        save_sets(&sets, tmp.path()).unwrap();
        let loaded = load_image_dirs(tmp.path()).unwrap();
        assert_eq!(loaded, sets);
    }

    #[test]
    fn plain_directories_load_without_specs() {
        let tmp = tempfile::tempdir().unwrap();
        let mut sets = generate_sets(2, 4, 16, 0).unwrap();
        for s in &mut sets {
            s.identity = None;
        }
        save_sets(&sets, tmp.path()).unwrap();
        let loaded = load_image_dirs(tmp.path()).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded.iter().map(|s| s.len()).collect::<Vec<_>>(), vec![4, 4]);
        assert!(loaded.iter().all(|s| s.identity.is_none()));
    }

    #[test]
    fn corrupt_png_names_the_file() {
        let tmp = tempfile::tempdir().unwrap();
        let sets = generate_sets(2, 2, 16, 0).unwrap();
        save_sets(&sets, tmp.path()).unwrap();
        let bad = tmp.path().join("set_1").join("img_1.png");
        fs::write(&bad, b"not a png").unwrap();
        match load_image_dirs(tmp.path()) {
            Err(Error::Data { path, .. }) => assert_eq!(path, bad),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn mixed_resolutions_are_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let a = generate_sets(2, 2, 16, 0).unwrap();
        save_sets(&a, tmp.path()).unwrap();
        let odd = &generate_sets(2, 1, 32, 0).unwrap()[0].instances[0].image;
        let path = tmp.path().join("set_0").join("img_9.png");
        save_png(odd, &path).unwrap();
        match load_image_dirs(tmp.path()) {
            Err(Error::Data { path: p, .. }) => assert_eq!(p, path),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn single_directory_is_a_config_error() {
        let tmp = tempfile::tempdir().unwrap();
        fs::create_dir(tmp.path().join("only")).unwrap();
        assert!(matches!(load_image_dirs(tmp.path()), Err(Error::Config(_))));
    }
}

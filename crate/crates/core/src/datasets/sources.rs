use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use super::{normalize_tag, ImageRecord, MaskRefs, Source, View, NODULE, TUBERCULOSIS};
use crate::error::{Error, Result};

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "gif", "tif", "tiff", "img"];

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Sorted image files directly inside `dir`; a missing dir yields nothing.
fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_image(&path) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn dir_is_empty(dir: &Path) -> Result<bool> {
    Ok(std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .next()
        .is_none())
}

fn csv_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    if !path.is_file() {
        return Err(Error::MissingAnnotation(path.to_path_buf()));
    }
    csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Annotation {
            file: path.to_path_buf(),
            line: 1,
            message: e.to_string(),
        })
}

fn column(headers: &csv::StringRecord, name: &str, file: &Path) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.eq_ignore_ascii_case(name))
        .ok_or_else(|| Error::Annotation {
            file: file.to_path_buf(),
            line: 1,
            message: format!("missing column `{name}`"),
        })
}

fn field<'a>(row: &'a csv::StringRecord, idx: usize, name: &str, file: &Path) -> Result<&'a str> {
    row.get(idx).ok_or_else(|| Error::Annotation {
        file: file.to_path_buf(),
        line: row.position().map_or(0, |p| p.line() as usize),
        message: format!("missing field `{name}`"),
    })
}

fn annotation_err(file: &Path, row: &csv::StringRecord, message: String) -> Error {
    Error::Annotation {
        file: file.to_path_buf(),
        line: row.position().map_or(0, |p| p.line() as usize),
        message,
    }
}

/// MeSH-style field: `Term/qualifier;Other Term` or `normal`.
fn parse_mesh(field: &str) -> BTreeSet<String> {
    field
        .split(';')
        .map(|term| term.split('/').next().unwrap_or(""))
        .map(normalize_tag)
        .filter(|t| !t.is_empty() && t != "normal")
        .collect()
}

pub(super) fn load_indiana(root: &Path) -> Result<Vec<ImageRecord>> {
    if dir_is_empty(root)? {
        return Ok(Vec::new());
    }
    let reports_path = root.join("indiana_reports.csv");
    let projections_path = root.join("indiana_projections.csv");

    let mut reports = csv_reader(&reports_path)?;
    let headers = reports.headers()?.clone();
    let uid_col = column(&headers, "uid", &reports_path)?;
    let mesh_col = column(&headers, "MeSH", &reports_path)?;
    let mut labels_by_uid = HashMap::new();
    for row in reports.records() {
        let row = row.map_err(|e| Error::Annotation {
            file: reports_path.clone(),
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let uid = field(&row, uid_col, "uid", &reports_path)?;
        let mesh = field(&row, mesh_col, "MeSH", &reports_path)?;
        if uid.is_empty() {
            return Err(annotation_err(&reports_path, &row, "empty uid".into()));
        }
        labels_by_uid.insert(uid.to_string(), parse_mesh(mesh));
    }

    let image_dir = [root.join("images").join("images_normalized"), root.join("images")]
        .into_iter()
        .find(|d| d.is_dir())
        .unwrap_or_else(|| root.to_path_buf());

    let mut projections = csv_reader(&projections_path)?;
    let headers = projections.headers()?.clone();
    let uid_col = column(&headers, "uid", &projections_path)?;
    let file_col = column(&headers, "filename", &projections_path)?;
    let view_col = column(&headers, "projection", &projections_path)?;
    let mut records = Vec::new();
    for row in projections.records() {
        let row = row?;
        let uid = field(&row, uid_col, "uid", &projections_path)?;
        let filename = field(&row, file_col, "filename", &projections_path)?;
        let view: View = field(&row, view_col, "projection", &projections_path)?
            .parse()
            .map_err(|e: Error| annotation_err(&projections_path, &row, e.to_string()))?;
        let labels = labels_by_uid
            .get(uid)
            .cloned()
            .ok_or_else(|| annotation_err(&projections_path, &row, format!("uid `{uid}` has no report")))?;
        let path = image_dir.join(filename);
        records.push(ImageRecord {
            id: stem(&path),
            path,
            source: Source::Indiana,
            view,
            labels,
            masks: MaskRefs::default(),
        });
    }
    Ok(records)
}

fn find_mask(root: &Path, names: &[&str], image_stem: &str) -> Option<PathBuf> {
    for dir in names {
        for ext in ["gif", "png"] {
            let p = root.join("masks").join(dir).join(format!("{image_stem}.{ext}"));
            if p.is_file() {
                return Some(p);
            }
        }
    }
    None
}

pub(super) fn load_jsrt(root: &Path) -> Result<Vec<ImageRecord>> {
    let mut files = image_files(root)?;
    files.extend(image_files(&root.join("images"))?);
    let mut records = Vec::new();
    for path in files {
        let id = stem(&path);
        let upper = id.to_ascii_uppercase();
        let labels: BTreeSet<String> = if upper.starts_with("JPCLN") {
            [NODULE.to_string()].into()
        } else if upper.starts_with("JPCNN") {
            BTreeSet::new()
        } else {
            return Err(Error::validation(format!(
                "{}: JSRT file names start with JPCLN or JPCNN",
                path.display()
            )));
        };
        let masks = MaskRefs {
            lung_left: find_mask(root, &["left lung", "left_lung"], &id),
            lung_right: find_mask(root, &["right lung", "right_lung"], &id),
            heart: find_mask(root, &["heart"], &id),
        };
        records.push(ImageRecord {
            id,
            path,
            source: Source::Jsrt,
            view: View::Frontal,
            labels,
            masks,
        });
    }
    Ok(records)
}

pub(super) fn load_shenzhen(root: &Path) -> Result<Vec<ImageRecord>> {
    let mut files = image_files(root)?;
    files.extend(image_files(&root.join("CXR_png"))?);
    let mut records = Vec::new();
    for path in files {
        let id = stem(&path);
        let labels: BTreeSet<String> = match id.rsplit('_').next() {
            Some("0") => BTreeSet::new(),
            Some("1") => [TUBERCULOSIS.to_string()].into(),
            _ => {
                return Err(Error::validation(format!(
                    "{}: Shenzhen file names end in _0 (normal) or _1 (tuberculosis)",
                    path.display()
                )))
            }
        };
        records.push(ImageRecord {
            id,
            path,
            source: Source::Shenzhen,
            view: View::Frontal,
            labels,
            masks: MaskRefs::default(),
        });
    }
    Ok(records)
}

pub(super) fn load_synthetic(root: &Path) -> Result<Vec<ImageRecord>> {
    if dir_is_empty(root)? {
        return Ok(Vec::new());
    }
    let labels_path = root.join("labels.csv");
    let mut reader = csv_reader(&labels_path)?;
    let headers = reader.headers()?.clone();
    let id_col = column(&headers, "id", &labels_path)?;
    let file_col = column(&headers, "file", &labels_path)?;
    let view_col = column(&headers, "view", &labels_path)?;
    let labels_col = column(&headers, "labels", &labels_path)?;
    let mask_cols: Vec<Option<usize>> = ["lung_left", "lung_right", "heart"]
        .iter()
        .map(|n| headers.iter().position(|h| h == *n))
        .collect();

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Annotation {
            file: labels_path.clone(),
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        if row.len() != headers.len() {
            return Err(annotation_err(
                &labels_path,
                &row,
                format!("expected {} fields, found {}", headers.len(), row.len()),
            ));
        }
        let id = field(&row, id_col, "id", &labels_path)?.to_string();
        let file = field(&row, file_col, "file", &labels_path)?;
        let view: View = field(&row, view_col, "view", &labels_path)?
            .parse()
            .map_err(|e: Error| annotation_err(&labels_path, &row, e.to_string()))?;
        let labels = field(&row, labels_col, "labels", &labels_path)?
            .split('|')
            .map(normalize_tag)
            .filter(|t| !t.is_empty())
            .collect::<BTreeSet<_>>();
        if labels.contains("normal") {
            return Err(annotation_err(
                &labels_path,
                &row,
                "`normal` is written as an empty label list".into(),
            ));
        }
        let mask = |i: usize| {
            mask_cols[i]
                .and_then(|c| row.get(c))
                .filter(|s| !s.is_empty())
                .map(|s| root.join(s))
        };
        records.push(ImageRecord {
            id,
            path: root.join(file),
            source: Source::Synthetic,
            view,
            labels,
            masks: MaskRefs {
                lung_left: mask(0),
                lung_right: mask(1),
                heart: mask(2),
            },
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::load_manifest;

    fn touch(path: &Path) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(path, b"").unwrap();
    }

    #[test]
    fn empty_directory_gives_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        for source in [Source::Indiana, Source::Jsrt, Source::Shenzhen, Source::Synthetic] {
            let m = load_manifest(dir.path(), source).unwrap();
            assert_eq!(m.len(), 0, "{source}");
        }
    }

    #[test]
    fn shenzhen_counts_follow_file_suffixes() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..326 {
            touch(&dir.path().join("CXR_png").join(format!("CHNCXR_{i:04}_0.png")));
        }
        for i in 326..662 {
            touch(&dir.path().join("CXR_png").join(format!("CHNCXR_{i:04}_1.png")));
        }
        let m = load_manifest(dir.path(), Source::Shenzhen).unwrap();
        assert_eq!(m.len(), 662);
        assert_eq!(m.records.iter().filter(|r| r.has(TUBERCULOSIS)).count(), 336);
        assert_eq!(m.records.iter().filter(|r| r.is_normal()).count(), 326);
    }

    #[test]
    fn synthetic_fixture_tags_match_annotation() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("labels.csv"),
            "id,file,view,labels\n\
             a,a.png,frontal,\n\
             b,b.png,frontal,Cardiomegaly\n\
             c,c.png,lateral,cardiomegaly|Pulmonary Edema\n\
             d,d.png,frontal,nodule\n",
        )
        .unwrap();
        let m = load_manifest(dir.path(), Source::Synthetic).unwrap();
        assert_eq!(m.len(), 4);
        let tags = |id: &str| m.get(id).unwrap().labels.iter().cloned().collect::<Vec<_>>();
        assert!(tags("a").is_empty());
        assert_eq!(tags("b"), ["cardiomegaly"]);
        assert_eq!(tags("c"), ["cardiomegaly", "pulmonary_edema"]);
        assert_eq!(tags("d"), ["nodule"]);
        assert_eq!(m.get("c").unwrap().view, View::Lateral);
    }

    #[test]
    fn missing_annotation_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        touch(&dir.path().join("a.png"));
        let err = load_manifest(dir.path(), Source::Synthetic).unwrap_err();
        assert!(matches!(err, Error::MissingAnnotation(ref p) if p.ends_with("labels.csv")));
        let err = load_manifest(dir.path(), Source::Indiana).unwrap_err();
        assert!(err.to_string().contains("indiana_reports.csv"));
    }

    #[test]
    fn bad_label_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("labels.csv"),
            "id,file,view,labels\na,a.png,frontal,\nb,b.png,sideways,\n",
        )
        .unwrap();
        match load_manifest(dir.path(), Source::Synthetic).unwrap_err() {
            Error::Annotation { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn indiana_reports_and_projections_join() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("indiana_reports.csv"),
            "uid,MeSH,Problems\n\
             1,normal,normal\n\
             2,Cardiomegaly/borderline;Pulmonary Artery/enlarged,Cardiomegaly\n",
        )
        .unwrap();
        std::fs::write(
            dir.path().join("indiana_projections.csv"),
            "uid,filename,projection\n\
             1,1_IM-0001-4001.dcm.png,Frontal\n\
             1,1_IM-0001-3001.dcm.png,Lateral\n\
             2,2_IM-0652-1001.dcm.png,Frontal\n",
        )
        .unwrap();
        let m = load_manifest(dir.path(), Source::Indiana).unwrap();
        assert_eq!(m.len(), 3);
        assert!(m.records[0].is_normal());
        assert_eq!(m.records[1].view, View::Lateral);
        let tags: Vec<_> = m.records[2].labels.iter().cloned().collect();
        assert_eq!(tags, ["cardiomegaly", "pulmonary_artery"]);
    }

    #[test]
    fn jsrt_masks_follow_scr_layout() {
        let dir = tempfile::tempdir().unwrap();
        touch(&dir.path().join("JPCLN001.IMG"));
        touch(&dir.path().join("JPCNN001.IMG"));
        touch(&dir.path().join("masks/left lung/JPCLN001.gif"));
        touch(&dir.path().join("masks/right lung/JPCLN001.gif"));
        touch(&dir.path().join("masks/heart/JPCLN001.gif"));
        let m = load_manifest(dir.path(), Source::Jsrt).unwrap();
        assert_eq!(m.len(), 2);
        assert!(m.get("JPCLN001").unwrap().masks.is_complete());
        assert!(m.get("JPCLN001").unwrap().has(NODULE));
        assert!(m.get("JPCNN001").unwrap().is_normal());
        assert!(!m.get("JPCNN001").unwrap().masks.is_complete());
    }
}

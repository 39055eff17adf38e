use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::pgm::{image_to_pgm, load_pair, mask_to_pgm, write_pgm};
use super::SliceSample;

pub const MANIFEST_NAME: &str = "manifest.csv";
const HEADER: [&str; 5] = ["domain_id", "subject_id", "slice_index", "image_path", "mask_path"];

/// One corpus entry; paths are relative to the manifest's directory unless
/// absolute. An absent mask marks an unlabeled slice.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub domain_id: u8,
    pub subject_id: u32,
    pub slice_index: u32,
    pub image_path: PathBuf,
    pub mask_path: Option<PathBuf>,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Manifest {
        path: path.to_path_buf(),
        line,
        detail: e.to_string(),
    }
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e| csv_err(path, e);
    w.write_record(HEADER).map_err(io)?;
    for r in rows {
        let mask = r.mask_path.as_ref().map(|p| p.to_string_lossy().into_owned()).unwrap_or_default();
        w.write_record([
            r.domain_id.to_string(),
            r.subject_id.to_string(),
            r.slice_index.to_string(),
            r.image_path.to_string_lossy().into_owned(),
            mask,
        ])
        .map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().ne(HEADER) {
        return Err(Error::Manifest {
            path: path.to_path_buf(),
            line: 1,
            detail: format!("expected header {}", HEADER.join(",")),
        });
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let bad = |detail: String| Error::Manifest {
            path: path.to_path_buf(),
            line,
            detail,
        };
        let field = |i: usize| rec.get(i).unwrap_or("");
        let domain_id: u8 = field(0).parse().map_err(|_| bad(format!("bad domain_id {:?}", field(0))))?;
        if !(1..=4).contains(&domain_id) {
            return Err(bad(format!("domain_id {domain_id} outside 1..=4")));
        }
        let subject_id = field(1).parse().map_err(|_| bad(format!("bad subject_id {:?}", field(1))))?;
        let slice_index = field(2).parse().map_err(|_| bad(format!("bad slice_index {:?}", field(2))))?;
        if field(3).is_empty() {
            return Err(bad("empty image_path".into()));
        }
        rows.push(ManifestRow {
            domain_id,
            subject_id,
            slice_index,
            image_path: field(3).into(),
            mask_path: (!field(4).is_empty()).then(|| field(4).into()),
        });
    }
    Ok(rows)
}

/// Writes every slice as PGM files under `dir/d<domain>/` and then the
/// manifest. The manifest only appears once all images are on disk.
pub fn write_corpus(dir: &Path, corpus: &[Vec<SliceSample>]) -> Result<Vec<ManifestRow>> {
    let mut rows = Vec::new();
    for s in corpus.iter().flatten() {
        let sub = PathBuf::from(format!("d{}", s.domain_id));
        let full = dir.join(&sub);
        fs::create_dir_all(&full).map_err(|e| Error::io(&full, e))?;
        let stem = format!("s{:03}_{:03}", s.subject_id, s.slice_index);
        let image_path = sub.join(format!("{stem}_img.pgm"));
        write_pgm(&dir.join(&image_path), &image_to_pgm(&s.image))?;
        let mask_path = match &s.mask {
            Some(m) => {
                let p = sub.join(format!("{stem}_mask.pgm"));
                write_pgm(&dir.join(&p), &mask_to_pgm(m))?;
                Some(p)
            }
            None => None,
        };
        rows.push(ManifestRow {
            domain_id: s.domain_id,
            subject_id: s.subject_id,
            slice_index: s.slice_index,
            image_path,
            mask_path,
        });
    }
    write_manifest(&dir.join(MANIFEST_NAME), &rows)?;
    Ok(rows)
}

/// Loads the corpus named by a manifest, grouped by domain in ascending
/// order.
pub fn load_corpus(manifest: &Path) -> Result<Vec<Vec<SliceSample>>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut by_domain: Vec<Vec<SliceSample>> = vec![Vec::new(); 4];
    for row in read_manifest(manifest)? {
        let mask = row.mask_path.as_ref().map(|p| base.join(p));
        let mut s = load_pair(&base.join(&row.image_path), mask.as_deref(), row.domain_id)?;
        s.subject_id = row.subject_id;
        s.slice_index = row.slice_index;
        by_domain[row.domain_id as usize - 1].push(s);
    }
    Ok(by_domain.into_iter().filter(|d| !d.is_empty()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{dequantize, generate_domain, quantize, DomainSpec};

    #[test]
    fn corpus_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let mut slices = generate_domain(&DomainSpec::preset(3).unwrap(), 2, 2, 16, 4).unwrap();
        slices[1] = slices[1].unlabeled();
        let rows = write_corpus(dir.path(), &[slices.clone()]).unwrap();
        assert_eq!(read_manifest(&dir.path().join(MANIFEST_NAME)).unwrap(), rows);
        let back = load_corpus(&dir.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(back.len(), 1);
        for (a, b) in slices.iter().zip(&back[0]) {
            assert_eq!(a.key(), b.key());
            assert_eq!(a.mask, b.mask);
            let q = a.image.map(|x| dequantize(quantize(x)));
            assert_eq!(q, b.image);
        }
    }

    #[test]
    fn malformed_rows_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        fs::write(&p, "domain_id,subject_id,slice_index,image_path,mask_path\n9,0,0,a.pgm,\n").unwrap();
        assert!(matches!(read_manifest(&p), Err(Error::Manifest { line: 2, .. })));
        fs::write(&p, "a,b\n").unwrap();
        assert!(read_manifest(&p).is_err());
    }
}

//! CSV schema: header `domain,label,f0,...,f{d-1}`; unlabeled rows carry label -1.
//! Features are written with 17 significant digits so reading them back is lossless.

use std::path::Path;

use super::{DataError, Dataset, Domain};

fn io_err(path: &Path, e: impl ToString) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    let mut header = vec!["domain".to_string(), "label".to_string()];
    header.extend((0..ds.dim()).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(|e| io_err(path, e))?;
    for i in 0..ds.len() {
        let mut rec = vec![
            ds.domain().to_string(),
            ds.label(i).map_or("-1".to_string(), |y| y.to_string()),
        ];
        rec.extend(ds.row(i).iter().map(|v| format!("{v:.16e}")));
        w.write_record(&rec).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads a dataset written by [`save_dataset`]. Row numbers in errors count
/// data rows from 1.
pub fn load_dataset(path: &Path, num_classes: usize) -> Result<Dataset, DataError> {
    let mut r = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| io_err(path, e))?;
    let header = r.headers().map_err(|e| io_err(path, e))?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(DataError::Empty);
    }
    if header.len() < 3 || &header[0] != "domain" || &header[1] != "label" {
        return Err(DataError::Parse {
            row: 0,
            msg: format!("unexpected header {:?}", header.iter().collect::<Vec<_>>()),
        });
    }
    let dim = header.len() - 2;
    let mut domain = None;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| DataError::Parse {
            row,
            msg: e.to_string(),
        })?;
        if rec.len() != dim + 2 {
            return Err(DataError::Ragged {
                row,
                expected: dim,
                found: rec.len().saturating_sub(2),
            });
        }
        let d: Domain = rec[0].parse().map_err(|msg| DataError::Parse { row, msg })?;
        match domain {
            None => domain = Some(d),
            Some(expected) if expected != d => {
                return Err(DataError::MixedDomains {
                    row,
                    expected,
                    found: d,
                })
            }
            _ => {}
        }
        let label: i64 = rec[1].trim().parse().map_err(|_| DataError::Parse {
            row,
            msg: format!("bad label {:?}", &rec[1]),
        })?;
        labels.push(match label {
            -1 => None,
            l if l >= 0 && (l as usize) < num_classes => Some(l as usize),
            l => {
                return Err(DataError::LabelOutOfRange {
                    row,
                    label: l,
                    num_classes,
                })
            }
        });
        for f in rec.iter().skip(2) {
            let v: f64 = f.trim().parse().map_err(|_| DataError::Parse {
                row,
                msg: format!("bad feature {f:?}"),
            })?;
            features.push(v);
        }
    }
    let domain = domain.ok_or(DataError::Empty)?;
    if domain == Domain::Source {
        if let Some(pos) = labels.iter().position(Option::is_none) {
            return Err(DataError::UnlabeledSource { row: pos + 1 });
        }
    }
    Dataset::new(domain, num_classes, dim, features, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    #[test]
    fn round_trip_is_lossless() {
        let ds = Dataset::new(
            Domain::Source,
            3,
            2,
            vec![0.1, -1.0 / 3.0, 1e-300, 12345.678901234567, f64::MIN_POSITIVE, -0.0],
            vec![Some(0), Some(2), Some(1)],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        save_dataset(&ds, &p).unwrap();
        let back = load_dataset(&p, 3).unwrap();
        assert_eq!(back, ds);
        let bits: Vec<u64> = back.features().iter().map(|v| v.to_bits()).collect();
        let orig: Vec<u64> = ds.features().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, orig);

        let t = ds.without_labels();
        let t = Dataset::new(Domain::Target, 3, 2, t.features().to_vec(), t.labels().to_vec()).unwrap();
        save_dataset(&t, &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.lines().nth(1).unwrap().starts_with("target,-1,"));
        assert_eq!(load_dataset(&p, 3).unwrap(), t);
    }

    #[test]
    fn label_out_of_range_reports_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        fs::write(&p, "domain,label,f0\nsource,0,1.0\nsource,3,2.0\n").unwrap();
        match load_dataset(&p, 3) {
            Err(DataError::LabelOutOfRange { row: 2, label: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ragged_and_empty_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        fs::write(&p, "domain,label,f0,f1\nsource,0,1.0,2.0\nsource,1,2.0\n").unwrap();
        assert!(matches!(load_dataset(&p, 2), Err(DataError::Ragged { row: 2, .. })));
        fs::write(&p, "").unwrap();
        assert!(matches!(load_dataset(&p, 2), Err(DataError::Empty)));
        fs::write(&p, "domain,label,f0\n").unwrap();
        assert!(matches!(load_dataset(&p, 2), Err(DataError::Empty)));
        assert!(matches!(
            load_dataset(&dir.path().join("missing.csv"), 2),
            Err(DataError::Io { .. })
        ));
    }
}

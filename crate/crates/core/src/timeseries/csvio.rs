use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;

use super::{Dataset, FeatureKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct CsvOptions {
    pub label_column: Option<String>,
    /// Columns whose cells are category tokens rather than numbers.
    pub categorical: Vec<String>,
}

pub fn load_csv(path: impl AsRef<Path>, label_column: Option<&str>) -> Result<Dataset> {
    load_csv_with(
        path,
        &CsvOptions {
            label_column: label_column.map(str::to_string),
            categorical: Vec::new(),
        },
    )
}

/// Parse a headed, comma-separated file. Rows are numbered from 1, not
/// counting the header, in error messages.
pub fn load_csv_with(path: impl AsRef<Path>, opts: &CsvOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Csv(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();

    let label_idx = match &opts.label_column {
        Some(name) => Some(
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Csv(format!("label column \"{name}\" not in header")))?,
        ),
        None => None,
    };
    for c in &opts.categorical {
        if !header.contains(c) {
            return Err(Error::Csv(format!("categorical column \"{c}\" not in header")));
        }
    }

    let feature_cols: Vec<usize> = (0..header.len()).filter(|&j| Some(j) != label_idx).collect();
    let is_cat: Vec<bool> = feature_cols
        .iter()
        .map(|&j| opts.categorical.contains(&header[j]))
        .collect();

    let mut cells: Vec<Vec<String>> = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Csv(format!("row {row}: {e}")))?;
        if record.len() != header.len() {
            return Err(Error::Csv(format!(
                "row {row} has {} fields, header has {}",
                record.len(),
                header.len()
            )));
        }
        if let Some(li) = label_idx {
            let raw = &record[li];
            let label = match raw.parse::<f64>() {
                Ok(0.0) => false,
                Ok(1.0) => true,
                _ => {
                    return Err(Error::Cell {
                        row,
                        column: header[li].clone(),
                        message: format!("label \"{raw}\" is not 0 or 1"),
                    })
                }
            };
            labels.push(label);
        }
        cells.push(feature_cols.iter().map(|&j| record[j].to_string()).collect());
    }

    let t = cells.len();
    let m = feature_cols.len();
    let mut kinds = Vec::with_capacity(m);
    let mut values = DMatrix::zeros(t, m);
    for (k, &j) in feature_cols.iter().enumerate() {
        if is_cat[k] {
            let levels: Vec<String> = cells
                .iter()
                .map(|r| r[k].clone())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            for (i, r) in cells.iter().enumerate() {
                values[(i, k)] = levels.binary_search(&r[k]).unwrap_or_default() as f64;
            }
            kinds.push(FeatureKind::Categorical { levels });
        } else {
            for (i, r) in cells.iter().enumerate() {
                let v: f64 = r[k].parse().map_err(|_| Error::Cell {
                    row: i + 1,
                    column: header[j].clone(),
                    message: format!("cannot parse \"{}\" as a number", r[k]),
                })?;
                if !v.is_finite() {
                    return Err(Error::Cell {
                        row: i + 1,
                        column: header[j].clone(),
                        message: format!("non-finite value \"{}\"", r[k]),
                    });
                }
                values[(i, k)] = v;
            }
            kinds.push(FeatureKind::Continuous);
        }
    }

    let names = feature_cols.iter().map(|&j| header[j].clone()).collect();
    Dataset::new(values, label_idx.map(|_| labels), names, kinds)
}

/// Write the dataset with its header; labels, when present, go to a trailing
/// `label` column.
pub fn write_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);

    let mut header = dataset.feature_names().join(",");
    if dataset.labels().is_some() {
        header.push_str(",label");
    }
    writeln!(out, "{header}").map_err(io)?;

    let mut line = String::new();
    for t in 0..dataset.len() {
        line.clear();
        for (j, kind) in dataset.feature_kinds().iter().enumerate() {
            if j > 0 {
                line.push(',');
            }
            let v = dataset.values()[(t, j)];
            match kind {
                FeatureKind::Continuous => line.push_str(&v.to_string()),
                FeatureKind::Categorical { levels } => line.push_str(&levels[v as usize]),
            }
        }
        if let Some(labels) = dataset.labels() {
            line.push_str(if labels[t] { ",1" } else { ",0" });
        }
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn parses_labelled_csv() {
        let f = file("a,b,label\n1,2,0\n3,4,1\n5,6,0\n");
        let d = load_csv(f.path(), Some("label")).unwrap();
        assert_eq!((d.len(), d.num_features()), (3, 2));
        assert_eq!(d.labels().unwrap(), &[false, true, false]);
        assert_eq!(d.values()[(2, 1)], 6.0);
        assert_eq!(d.feature_names(), &["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn header_only() {
        let f = file("a,b,c\n");
        let d = load_csv(f.path(), None).unwrap();
        assert_eq!((d.len(), d.num_features()), (0, 3));
    }

    #[test]
    fn bad_cell_names_row_and_column() {
        let f = file("a,b\n1,2\n3,x\n");
        let err = load_csv(f.path(), None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 2"), "{msg}");
        assert!(msg.contains("column \"b\""), "{msg}");
    }

    #[test]
    fn error_cases() {
        assert!(matches!(
            load_csv("/nonexistent/file.csv", None),
            Err(Error::Io { .. })
        ));
        let ragged = file("a,b\n1,2\n3\n");
        assert!(load_csv(ragged.path(), None).unwrap_err().to_string().contains("row 2"));
        let bad_label = file("a,label\n1,0\n2,2\n");
        assert!(matches!(
            load_csv(bad_label.path(), Some("label")),
            Err(Error::Cell { row: 2, .. })
        ));
        let nan = file("a\n1\nNaN\n");
        assert!(load_csv(nan.path(), None).is_err());
    }

    #[test]
    fn categorical_tokens() {
        let f = file("mode,v\nB,1\nA,2\nB,3\n");
        let opts = CsvOptions {
            label_column: None,
            categorical: vec!["mode".into()],
        };
        let d = load_csv_with(f.path(), &opts).unwrap();
        assert_eq!(
            d.feature_kinds()[0],
            FeatureKind::Categorical {
                levels: vec!["A".into(), "B".into()]
            }
        );
        assert_eq!(d.values().column(0).as_slice(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn write_then_read() {
        let f = file("a,b,label\n1.5,2,0\n-3,4e-3,1\n");
        let d = load_csv(f.path(), Some("label")).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        write_csv(&d, out.path()).unwrap();
        let back = load_csv(out.path(), Some("label")).unwrap();
        assert_eq!(d, back);
    }
}

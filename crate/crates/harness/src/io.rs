//! Dataset files and the loader behind `[data]`.

use std::path::Path;

use lookbehind_core::data::{encode_idx_dataset, gen_gaussian_blobs, idx_dataset, Dataset};

use crate::config::DataConfig;
use crate::error::{HarnessError, Result};

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| HarnessError::io(path, e))
}

/// Images and labels from a pair of IDX files; pixels scaled to [0, 1].
pub fn read_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let (img, lab) = (read(images)?, read(labels)?);
    idx_dataset(&img, &lab).map_err(|e| HarnessError::Data {
        path: images.to_path_buf(),
        reason: format!("{e} (labels: {})", labels.display()),
    })
}

/// Writes `dataset` back as an image/label IDX pair.
pub fn write_idx(dataset: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let (img, lab) = encode_idx_dataset(dataset)?;
    std::fs::write(images, img).map_err(|e| HarnessError::io(images, e))?;
    std::fs::write(labels, lab).map_err(|e| HarnessError::io(labels, e))
}

/// CSV with a header row; the `label` column holds integer classes and every
/// other column is a feature.
pub fn read_csv_dataset(path: &Path) -> Result<Dataset> {
    let data_err = |reason: String| HarnessError::Data {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(source) => HarnessError::io(path, source),
        other => data_err(format!("{other:?}")),
    })?;
    let headers = reader.headers().map_err(|e| data_err(e.to_string()))?.clone();
    let label_col = headers
        .iter()
        .position(|h| h == "label")
        .ok_or_else(|| data_err("no `label` column".into()))?;
    let features = headers.len() - 1;
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| data_err(e.to_string()))?;
        for (j, field) in record.iter().enumerate() {
            let field = field.trim();
            if j == label_col {
                labels.push(
                    field
                        .parse::<usize>()
                        .map_err(|_| data_err(format!("row {}: bad label `{field}`", row + 2)))?,
                );
            } else {
                inputs.push(
                    field
                        .parse::<f64>()
                        .map_err(|_| data_err(format!("row {}: bad value `{field}`", row + 2)))?,
                );
            }
        }
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(inputs, vec![features], labels, classes, path.display().to_string())
        .map_err(|e| data_err(e.to_string()))
}

/// Train, test and optional held-out sets.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub test: Option<Dataset>,
    pub heldout: Option<Dataset>,
}

fn with_heldout(train: Dataset, test: Option<Dataset>, fraction: f64, seed: u64) -> Result<Splits> {
    if fraction == 0.0 {
        return Ok(Splits {
            train,
            test,
            heldout: None,
        });
    }
    let (train, heldout) = train.train_test_split(fraction, seed.wrapping_add(1))?;
    Ok(Splits {
        train,
        test,
        heldout: Some(heldout),
    })
}

/// Featureless rows the analytic landscapes are trained on.
pub fn unit_dataset(rows: usize) -> Result<Dataset> {
    Ok(Dataset::new(vec![], vec![0], vec![0; rows.max(1)], 1, "unit")?)
}

pub fn load_splits(data: &DataConfig) -> Result<Splits> {
    match data {
        DataConfig::Blobs {
            test_fraction,
            heldout_fraction,
            seed,
            ..
        } => {
            let all = load_full(data)?;
            let (train, test) = all.train_test_split(*test_fraction, *seed)?;
            with_heldout(train, Some(test), *heldout_fraction, *seed)
        }
        DataConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            heldout_fraction,
            seed,
        } => {
            let train = read_idx(train_images, train_labels)?;
            let test = read_idx(test_images, test_labels)?;
            with_heldout(train, Some(test), *heldout_fraction, *seed)
        }
        DataConfig::Csv {
            train,
            test,
            heldout_fraction,
            seed,
        } => {
            let train = read_csv_dataset(train)?;
            let test = read_csv_dataset(test)?;
            with_heldout(train, Some(test), *heldout_fraction, *seed)
        }
        DataConfig::Unit { steps } => Ok(Splits {
            train: unit_dataset(*steps)?,
            test: None,
            heldout: None,
        }),
    }
}

/// Every available example in one dataset (for task splitting).
pub fn load_full(data: &DataConfig) -> Result<Dataset> {
    match data {
        DataConfig::Blobs {
            classes,
            per_class,
            dim,
            separation,
            label_noise,
            seed,
            ..
        } => {
            let d = gen_gaussian_blobs(*classes, *per_class, dim.unwrap_or(*classes), *separation, *seed)?;
            Ok(d.with_label_noise(*label_noise, *seed)?)
        }
        DataConfig::Idx {
            train_images,
            train_labels,
            ..
        } => read_idx(train_images, train_labels),
        DataConfig::Csv { train, .. } => read_csv_dataset(train),
        DataConfig::Unit { steps } => unit_dataset(*steps),
    }
}

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::format::{read_array, write_array, Array};
use super::{normalize_rows, ClassKind, GzslDataset, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Contents of `meta.json` in a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub name: String,
    pub spec: Option<SyntheticSpec>,
    pub ground_truth_regions: Option<Vec<Vec<i64>>>,
}

pub fn write_dataset(d: &GzslDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n = d.len();
    let mut desc = Vec::with_capacity(n * d.raw_dim() * d.regions());
    for x in &d.descriptors {
        desc.extend_from_slice(x.data());
    }
    write_array(
        &dir.join("descriptors.aarr"),
        &Array::F64 {
            shape: vec![n, d.raw_dim(), d.regions()],
            data: desc,
        },
    )?;
    write_array(
        &dir.join("labels.aarr"),
        &Array::U32 {
            shape: vec![n],
            data: d.labels.iter().map(|&l| l as u32).collect(),
        },
    )?;
    write_array(&dir.join("attributes.aarr"), &Array::from(&d.raw_attributes))?;
    write_array(&dir.join("embeddings.aarr"), &Array::from(&d.embeddings))?;
    write_array(
        &dir.join("splits.aarr"),
        &Array::U8 {
            shape: vec![n],
            data: d.splits.iter().map(|s| s.code()).collect(),
        },
    )?;
    write_array(
        &dir.join("classes.aarr"),
        &Array::U8 {
            shape: vec![d.num_classes()],
            data: d.class_kinds.iter().map(|c| c.code()).collect(),
        },
    )?;
    let meta = Meta {
        name: d.name.clone(),
        spec: d.spec.clone(),
        ground_truth_regions: d.ground_truth.clone(),
    };
    let path = dir.join("meta.json");
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

fn header_len(ndim: usize) -> u64 {
    16 + 4 * ndim as u64
}

fn expect_rank(path: &Path, shape: &[usize], rank: usize) -> Result<()> {
    if shape.len() != rank {
        return Err(Error::format(
            12,
            format!("{}: expected rank {rank}, found {shape:?}", path.display()),
        ));
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<GzslDataset> {
    let path = dir.join("descriptors.aarr");
    let desc = read_array(&path)?.into_tensor()?;
    expect_rank(&path, desc.shape(), 3)?;
    let (n, dim, r) = (desc.shape()[0], desc.shape()[1], desc.shape()[2]);
    let descriptors = desc
        .data()
        .chunks_exact(dim * r)
        .map(|c| Tensor::new(vec![dim, r], c.to_vec()))
        .collect::<Result<Vec<_>>>()?;

    let path = dir.join("labels.aarr");
    let (shape, raw_labels) = read_array(&path)?.into_u32()?;
    expect_rank(&path, &shape, 1)?;
    let labels: Vec<usize> = raw_labels.into_iter().map(|l| l as usize).collect();

    let path = dir.join("attributes.aarr");
    let raw_attributes = read_array(&path)?.into_tensor()?;
    expect_rank(&path, raw_attributes.shape(), 2)?;
    let path = dir.join("embeddings.aarr");
    let embeddings = read_array(&path)?.into_tensor()?;
    expect_rank(&path, embeddings.shape(), 2)?;

    let path = dir.join("splits.aarr");
    let (shape, codes) = read_array(&path)?.into_u8()?;
    expect_rank(&path, &shape, 1)?;
    let splits = codes
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            Split::from_code(c).ok_or_else(|| {
                Error::format(
                    header_len(1) + i as u64,
                    format!("{}: unknown split code {c}", path.display()),
                )
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let path = dir.join("classes.aarr");
    let (shape, codes) = read_array(&path)?.into_u8()?;
    expect_rank(&path, &shape, 1)?;
    let class_kinds = codes
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            ClassKind::from_code(c).ok_or_else(|| {
                Error::format(
                    header_len(1) + i as u64,
                    format!("{}: unknown class code {c}", path.display()),
                )
            })
        })
        .collect::<Result<Vec<_>>>()?;

    if labels.len() != n || splits.len() != n {
        return Err(Error::format(
            header_len(1),
            format!(
                "{n} descriptors but {} labels and {} splits",
                labels.len(),
                splits.len()
            ),
        ));
    }
    if class_kinds.len() != raw_attributes.rows() {
        return Err(Error::format(
            header_len(1),
            format!(
                "{} class codes for {} attribute rows",
                class_kinds.len(),
                raw_attributes.rows()
            ),
        ));
    }

    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: Meta = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;

    Ok(GzslDataset {
        name: meta.name,
        descriptors,
        labels,
        attributes: normalize_rows(&raw_attributes),
        raw_attributes,
        embeddings,
        class_kinds,
        splits,
        spec: meta.spec,
        ground_truth: meta.ground_truth_regions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;

    #[test]
    fn round_trip_is_exact() {
        let d = generate_synthetic(&SyntheticSpec {
            samples_per_class: 6,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&d, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn corrupted_split_code_is_a_format_error() {
        let d = generate_synthetic(&SyntheticSpec {
            samples_per_class: 3,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&d, dir.path()).unwrap();
        let path = dir.path().join("splits.aarr");
        let mut bytes = fs::read(&path).unwrap();
        bytes[20 + 5] = 7;
        fs::write(&path, bytes).unwrap();
        match read_dataset(dir.path()) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 25),
            other => panic!("{other:?}"),
        }
    }
}

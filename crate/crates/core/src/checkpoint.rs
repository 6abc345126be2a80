//! Directories of `.dst` tensors described by a `manifest.json`:
//!
//! ```json
//! { "kind": "toy_net", "config": { ... }, "tensors": { "fc.weight": "fc.weight.dst" } }
//! ```
//!
//! Tensor files are named after their tensor; file names in the manifest are
//! relative to the directory.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::backbone::{OrderDataset, ToyNet, ToyNetSpec, ORDER_SHAPE};
use crate::dsa::{DsaConfig, DsaParams};
use crate::error::{invalid, Error, Result};
use crate::io;
use crate::rng;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub config: serde_json::Value,
    pub tensors: IndexMap<String, String>,
}

fn write_dir<'a, C: Serialize>(
    dir: &Path,
    kind: &str,
    config: &C,
    tensors: impl IntoIterator<Item = (String, &'a Tensor)>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut files = IndexMap::new();
    for (name, t) in tensors {
        let file = format!("{name}.dst");
        io::save(dir.join(&file), t)?;
        files.insert(name, file);
    }
    let manifest = Manifest {
        kind: kind.to_string(),
        config: serde_json::to_value(config)?,
        tensors: files,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST), text)?;
    Ok(())
}

fn read_manifest<C: DeserializeOwned>(dir: &Path, kind: &str) -> Result<(Manifest, C)> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
    if manifest.kind != kind {
        return Err(invalid(
            "checkpoint",
            format!("{} holds a {:?}, expected {kind:?}", dir.display(), manifest.kind),
        ));
    }
    let config = serde_json::from_value(manifest.config.clone())?;
    Ok((manifest, config))
}

/// Overwrites every slot in `slots` from the manifest, checking shapes.
fn fill<'a>(dir: &Path, manifest: &Manifest, slots: impl IntoIterator<Item = (String, &'a mut Tensor)>) -> Result<()> {
    let mut seen = 0;
    for (name, slot) in slots {
        let file = manifest
            .tensors
            .get(&name)
            .ok_or_else(|| invalid("checkpoint", format!("missing tensor {name:?}")))?;
        let t = io::load(dir.join(file))?;
        if t.shape() != slot.shape() {
            return Err(Error::ShapeMismatch {
                op: "checkpoint",
                lhs: slot.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        *slot = t;
        seen += 1;
    }
    if seen != manifest.tensors.len() {
        return Err(invalid(
            "checkpoint",
            format!("manifest lists {} tensors, model has {seen}", manifest.tensors.len()),
        ));
    }
    Ok(())
}

pub fn save_dsa_params(dir: impl AsRef<Path>, params: &DsaParams, cfg: &DsaConfig) -> Result<()> {
    params.validate(cfg)?;
    write_dir(
        dir.as_ref(),
        "dsa_params",
        cfg,
        params.named().into_iter().map(|(n, t)| (n.to_string(), t)),
    )
}

pub fn load_dsa_params(dir: impl AsRef<Path>) -> Result<(DsaConfig, DsaParams)> {
    let dir = dir.as_ref();
    let (manifest, cfg): (_, DsaConfig) = read_manifest(dir, "dsa_params")?;
    cfg.validate()?;
    let mut params = DsaParams::zeros(&cfg);
    fill(
        dir,
        &manifest,
        params.named_mut().into_iter().map(|(n, t)| (n.to_string(), t)),
    )?;
    Ok((cfg, params))
}

pub fn save_toy_net(dir: impl AsRef<Path>, net: &ToyNet) -> Result<()> {
    write_dir(dir.as_ref(), "toy_net", &net.spec, net.named())
}

pub fn load_toy_net(dir: impl AsRef<Path>) -> Result<ToyNet> {
    let dir = dir.as_ref();
    let (manifest, spec): (_, ToyNetSpec) = read_manifest(dir, "toy_net")?;
    let mut net = ToyNet::init(spec, &mut rng::rng(0))?;
    fill(dir, &manifest, net.named_mut())?;
    Ok(net)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct DatasetInfo {
    samples: usize,
    shape: [usize; 5],
}

pub fn save_dataset(dir: impl AsRef<Path>, data: &OrderDataset) -> Result<()> {
    let n = data.len();
    let labels = Tensor::new(vec![n], data.labels.iter().map(|&l| l as f64).collect())?;
    let amplitudes = Tensor::new(
        vec![n, 4],
        data.amplitudes.iter().flatten().map(|&a| f64::from(a)).collect(),
    )?;
    let info = DatasetInfo {
        samples: n,
        shape: ORDER_SHAPE,
    };
    write_dir(
        dir.as_ref(),
        "order_dataset",
        &info,
        [
            ("inputs".to_string(), &data.inputs),
            ("labels".to_string(), &labels),
            ("amplitudes".to_string(), &amplitudes),
        ],
    )
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<OrderDataset> {
    let dir = dir.as_ref();
    let (manifest, info): (_, DatasetInfo) = read_manifest(dir, "order_dataset")?;
    let n = info.samples;
    let mut inputs = Tensor::zeros(&[&[n][..], &info.shape[..]].concat());
    let mut labels = Tensor::zeros(&[n]);
    let mut amplitudes = Tensor::zeros(&[n, 4]);
    fill(
        dir,
        &manifest,
        [
            ("inputs".to_string(), &mut inputs),
            ("labels".to_string(), &mut labels),
            ("amplitudes".to_string(), &mut amplitudes),
        ],
    )?;
    let labels = labels.data().iter().map(|&l| l as usize).collect();
    let amplitudes = amplitudes
        .data()
        .chunks(4)
        .map(|c| [c[0] as u8, c[1] as u8, c[2] as u8, c[3] as u8])
        .collect();
    Ok(OrderDataset {
        inputs,
        labels,
        amplitudes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::make_order_dataset;

    fn same(a: &[(String, &Tensor)], b: &[(String, &Tensor)]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|((n, x), (m, y))| n == m && x.bitwise_eq(y))
    }

    #[test]
    fn dsa_params_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DsaConfig::default();
        let params = DsaParams::init(&cfg, &mut rng::rng(4));
        save_dsa_params(dir.path(), &params, &cfg).unwrap();
        let (cfg2, back) = load_dsa_params(dir.path()).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(back, params);
        let text = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert!(text.contains("\"w1\": \"w1.dst\""));
    }

    #[test]
    fn toy_net_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = ToyNet::init(ToyNetSpec::two_block(Some(DsaConfig::default())), &mut rng::rng(9)).unwrap();
        save_toy_net(dir.path(), &net).unwrap();
        let back = load_toy_net(dir.path()).unwrap();
        assert!(same(&net.named(), &back.named()));
        assert_eq!(back.spec, net.spec);
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = make_order_dataset(6, 2).unwrap();
        save_dataset(dir.path(), &data).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), data);
    }

    #[test]
    fn wrong_kind_and_shapes_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DsaConfig::default();
        save_dsa_params(dir.path(), &DsaParams::zeros(&cfg), &cfg).unwrap();
        assert!(load_toy_net(dir.path()).is_err());
        io::save(dir.path().join("w1.dst"), &Tensor::zeros(&[2, 2])).unwrap();
        assert!(matches!(load_dsa_params(dir.path()), Err(Error::ShapeMismatch { .. })));
    }
}

//! On-disk layout of a fitted run:
//!
//! - `manifest.txt`: `key=value` lines with the configuration, data shape and
//!   SHA-256 digests of the other files
//! - `train.csv`: training data in original units
//! - `scheme.txt`: the pruned partition
//! - `samples.csv`: one row per kept draw
//!
//! Floats are written in shortest round-trip form, so a reloaded run predicts
//! exactly as the original.

use std::fs;
use std::path::Path;

use nalgebra::DVector;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::data::{parse_csv, write_raw_csv, Dataset, RawTable};
use crate::error::{Result, SagpError};
use crate::model::{Fit, FittedModel};
use crate::partition::RpScheme;
use crate::sampler::{Draw, PosteriorSamples};

pub const MANIFEST: &str = "manifest.txt";
pub const TRAIN: &str = "train.csv";
pub const SCHEME: &str = "scheme.txt";
pub const SAMPLES: &str = "samples.csv";
const FORMAT: &str = "sagp-run-1";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn samples_to_csv(s: &PosteriorSamples) -> Result<String> {
    let mut header = vec!["iteration".to_string(), "sigma2".to_string()];
    for &id in &s.component_ids {
        header.push(format!("eta_{id}"));
        header.extend((1..=s.m).map(|a| format!("f_{id}_{a}")));
        header.extend((1..=s.m).map(|a| format!("pi_{id}_{a}")));
    }
    let rows = s.draws.iter().map(|d| {
        let mut r = vec![d.iteration.to_string(), d.sigma2_eps.to_string()];
        for k in 0..s.component_ids.len() {
            r.push(d.eta[k].to_string());
            r.extend(d.pseudo_targets[k].iter().map(f64::to_string));
            r.extend(d.pseudo_inputs[k].iter().map(usize::to_string));
        }
        r
    });
    let mut buf = Vec::new();
    crate::data::write_table(&mut buf, &header, rows)?;
    String::from_utf8(buf).map_err(|e| SagpError::InvalidInput(e.to_string()))
}

/// Inverse of [`samples_to_csv`]; layers and `ln rho` come from the scheme
/// and configuration that produced the samples.
pub fn samples_from_csv(text: &str, scheme: &RpScheme, cfg: &RunConfig) -> Result<PosteriorSamples> {
    let priors = cfg.spec.priors()?;
    let ids = scheme.active_ids();
    let m = scheme.m_required();
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| SagpError::InvalidInput(format!("{SAMPLES}: {e}")))?
        .clone();
    let width = 2 + ids.len() * (1 + 2 * m);
    if header.len() != width || ids.iter().any(|id| !header.iter().any(|h| h == format!("eta_{id}"))) {
        return Err(SagpError::InvalidInput(format!(
            "{SAMPLES} does not match the scheme's active components"
        )));
    }
    let bad = |row: usize, column: &str, raw: &str| SagpError::Parse {
        row,
        column: column.to_string(),
        message: format!("`{raw}` is not valid"),
    };
    let mut draws = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| SagpError::InvalidInput(format!("{SAMPLES}: {e}")))?;
        let f = |c: usize| -> Result<f64> { rec[c].parse().map_err(|_| bad(r + 1, &header[c], &rec[c])) };
        let u = |c: usize| -> Result<usize> { rec[c].parse().map_err(|_| bad(r + 1, &header[c], &rec[c])) };
        let mut d = Draw {
            iteration: u(0)?,
            sigma2_eps: f(1)?,
            eta: Vec::with_capacity(ids.len()),
            pseudo_targets: Vec::with_capacity(ids.len()),
            pseudo_inputs: Vec::with_capacity(ids.len()),
        };
        let mut c = 2;
        for _ in &ids {
            d.eta.push(f(c)?);
            let targets = (0..m).map(|a| f(c + 1 + a)).collect::<Result<Vec<_>>>()?;
            d.pseudo_targets.push(DVector::from_vec(targets));
            d.pseudo_inputs.push((0..m).map(|a| u(c + 1 + m + a)).collect::<Result<_>>()?);
            c += 1 + 2 * m;
        }
        draws.push(d);
    }
    let layers: Vec<usize> = ids.iter().map(|&j| scheme.component(j).layer).collect();
    Ok(PosteriorSamples {
        ln_rho: layers.iter().map(|&l| priors.ln_rho(l)).collect(),
        component_ids: ids,
        layers,
        m,
        draws,
    })
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<String> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| SagpError::io(&path, e))?;
    Ok(sha256_hex(bytes))
}

fn read(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let path = dir.join(name);
    fs::read(&path).map_err(|e| SagpError::io(&path, e))
}

pub fn save_run(dir: impl AsRef<Path>, cfg: &RunConfig, train: &RawTable, model: &FittedModel) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| SagpError::io(dir, e))?;
    let mut train_csv = Vec::new();
    write_raw_csv(&mut train_csv, train)?;
    let h_train = write(dir, TRAIN, &train_csv)?;
    let h_scheme = write(dir, SCHEME, model.fit.scheme.to_text(None).as_bytes())?;
    let h_samples = write(dir, SAMPLES, samples_to_csv(&model.fit.samples)?.as_bytes())?;
    let t = &model.transform;
    let mut manifest = format!(
        "format={FORMAT}\nseed={}\nn={}\nd={}\n",
        cfg.spec.mcmc.seed,
        train.n(),
        train.dim()
    );
    for line in cfg.to_text().lines() {
        manifest.push_str(&format!("config.{line}\n"));
    }
    let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
    manifest.push_str(&format!(
        "x_min={}\nx_max={}\ny_mean={}\ny_sd={}\nkept_draws={}\nsha256.{TRAIN}={h_train}\nsha256.{SCHEME}={h_scheme}\nsha256.{SAMPLES}={h_samples}\n",
        join(&t.x_min),
        join(&t.x_max),
        t.y_mean,
        t.y_sd,
        model.fit.samples.len(),
    ));
    write(dir, MANIFEST, manifest.as_bytes())?;
    Ok(())
}

pub fn load_run(dir: impl AsRef<Path>) -> Result<(RunConfig, FittedModel)> {
    let dir = dir.as_ref();
    let manifest = String::from_utf8(read(dir, MANIFEST)?)
        .map_err(|e| SagpError::InvalidInput(format!("{MANIFEST}: {e}")))?;
    let (pairs, bad) = crate::config::parse_pairs(&manifest);
    if !bad.is_empty() {
        return Err(SagpError::Config(bad));
    }
    let get = |k: &str| pairs.iter().find(|(key, _)| key == k).map(|(_, v)| v.as_str());
    if get("format") != Some(FORMAT) {
        return Err(SagpError::InvalidInput(format!("{MANIFEST}: unsupported format")));
    }
    let config_pairs: Vec<(String, String)> = pairs
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("config.").map(|k| (k.to_string(), v.clone())))
        .collect();
    let cfg = RunConfig::from_sources(None, &config_pairs)?;

    let mut files = Vec::new();
    for name in [TRAIN, SCHEME, SAMPLES] {
        let bytes = read(dir, name)?;
        let want = get(&format!("sha256.{name}"))
            .ok_or_else(|| SagpError::InvalidInput(format!("{MANIFEST}: no digest for {name}")))?;
        if sha256_hex(&bytes) != want {
            return Err(SagpError::InvalidInput(format!("{name} does not match its recorded digest")));
        }
        files.push(String::from_utf8(bytes).map_err(|e| SagpError::InvalidInput(format!("{name}: {e}")))?);
    }
    let train = parse_csv(files[0].as_bytes(), true)?;
    let data = Dataset::standardize(&train)?;
    let scheme = RpScheme::from_text(&files[1])?;
    let samples = samples_from_csv(&files[2], &scheme, &cfg)?;
    Ok((
        cfg,
        FittedModel {
            fit: Fit {
                scheme,
                x: data.x,
                samples,
            },
            transform: data.transform,
        },
    ))
}

//! Ablation grids over FiLM placement and semantic codebook size.

use crate::error::{Error, Result};
use crate::model::{format_placements, parse_placements, FilmPlacement, SemDac, FRAME_RATE};
use crate::nn::ParamStore;
use crate::quantization::bitrate_kbps;
use crate::training::TrainConfig;
use candle_core::{DType, Device, Tensor};
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub const MANIFEST_HEADER: &str = "cell,config,film_placements,semantic_size,n_quantizers,nominal_bitrate_kbps,n_params";
pub const FILM_CELLS: [&str; 8] = ["none", "F0", "F1", "F2", "F3", "F0+F1", "F0+F2", "F0+F3"];
pub const SEMANTIC_SIZES: [usize; 4] = [128, 256, 512, 1024];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grid {
    Film,
    SemSize,
}

impl FromStr for Grid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "film" => Ok(Self::Film),
            "semsize" => Ok(Self::SemSize),
            other => Err(Error::config("grid", format!("unknown grid `{other}`; expected film or semsize"))),
        }
    }
}

/// Derived configurations, one per cell, named by the cell label.
pub fn grid_cells(grid: Grid, base: &TrainConfig) -> Result<Vec<(String, TrainConfig)>> {
    match grid {
        Grid::Film => FILM_CELLS
            .iter()
            .map(|&cell| {
                let mut cfg = base.clone();
                cfg.model.decoder.film_placements = parse_placements(cell)?;
                Ok((cell.to_string(), cfg))
            })
            .collect(),
        Grid::SemSize => Ok(SEMANTIC_SIZES
            .iter()
            .map(|&s| {
                let mut cfg = base.clone();
                cfg.model.rvq.semantic_size = s;
                (format!("semantic{s}"), cfg)
            })
            .collect()),
    }
}

/// Builds the model and checks that a 6080-sample input maps to 19 frames
/// and back to 6080 samples, and that every FiLM map matches its decoder
/// feature map. Returns the generator's parameter count.
pub fn check_shapes(cfg: &TrainConfig) -> Result<usize> {
    cfg.validate()?;
    let mut store = ParamStore::new(0);
    let model = SemDac::new(&mut store, cfg.model.clone())?;
    let hop = model.hop_length();
    let frames = 19;
    let x = Tensor::zeros((1, 1, frames * hop), DType::F32, &Device::Cpu)?;
    let out = model.forward(&x, cfg.model.rvq.n_acoustic)?;
    if out.latents.dims() != [1, cfg.model.encoder.latent_dim, frames] {
        return Err(Error::Shape(format!("latents {:?} for {} samples", out.latents.dims(), frames * hop)));
    }
    if out.audio.dims() != [1, 1, frames * hop] {
        return Err(Error::Shape(format!("reconstruction {:?} for {} samples", out.audio.dims(), frames * hop)));
    }
    if out.projected.dims() != [1, cfg.model.teacher_dim, frames] {
        return Err(Error::Shape(format!("projection {:?}", out.projected.dims())));
    }
    for p in model.film_generate(&out.rvq.semantic_q)? {
        let expected = [1, cfg.model.decoder.channels_at(p.placement.index()), frames * p.placement.cumulative_rate(&cfg.model.decoder.rates)];
        if p.gamma.dims() != expected || p.beta.dims() != expected {
            return Err(Error::Shape(format!("{} maps {:?}, expected {expected:?}", p.placement, p.gamma.dims())));
        }
    }
    Ok(store.num_elements())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub cell: String,
    pub config_path: PathBuf,
    pub placements: Vec<FilmPlacement>,
    pub semantic_size: usize,
    pub n_quantizers: usize,
    pub nominal_bitrate_kbps: f64,
    pub n_params: usize,
}

/// Writes `<cell>.conf` for every cell plus `manifest.csv` into `out_dir`.
pub fn write_grid(grid: Grid, base: &TrainConfig, out_dir: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    let mut rows = Vec::new();
    let mut csv = format!("{MANIFEST_HEADER}\n");
    for (cell, cfg) in grid_cells(grid, base)? {
        let n_params = check_shapes(&cfg)?;
        let path = out_dir.join(format!("{cell}.conf"));
        std::fs::write(&path, cfg.to_text()).map_err(Error::io(&path))?;
        let row = ManifestRow {
            cell: cell.clone(),
            config_path: path,
            placements: cfg.model.decoder.film_placements.iter().copied().collect(),
            semantic_size: cfg.model.rvq.semantic_size,
            n_quantizers: cfg.model.rvq.n_quantizers(),
            nominal_bitrate_kbps: bitrate_kbps(&cfg.model.rvq.sizes(), FRAME_RATE)?,
            n_params,
        };
        csv.push_str(&format!(
            "{},{}.conf,{},{},{},{},{}\n",
            row.cell,
            cell,
            format_placements(&cfg.model.decoder.film_placements),
            row.semantic_size,
            row.n_quantizers,
            row.nominal_bitrate_kbps,
            row.n_params
        ));
        rows.push(row);
    }
    let manifest = out_dir.join("manifest.csv");
    std::fs::write(&manifest, csv).map_err(Error::io(&manifest))?;
    Ok(rows)
}

//! Run directory layout: `manifest.json`, `metrics.csv`, `summary.json`
//! and `maps/*.pgm`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use gpmap_core::{Error, Experiment, MetricRecord, MetricSink, SimConfig};
use gpmap_core::simulation::Raster;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::summary::Summary;

pub const MANIFEST: &str = "manifest.json";
pub const METRICS: &str = "metrics.csv";
pub const SUMMARY: &str = "summary.json";
pub const MAPS: &str = "maps";
const CSV_HEADER: &str = "seed,step,mode,metric,value,n_points";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Layout {
    pub manifest: String,
    pub metrics: String,
    pub summary: String,
    pub maps: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub experiment: Experiment,
    pub seeds: Vec<u64>,
    /// Fully resolved config, every default materialized.
    pub config: String,
    /// Hex SHA-256 of `config`.
    pub config_sha256: String,
    pub layout: Layout,
}

fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl Manifest {
    pub fn new(cfg: &SimConfig, seeds: &[u64]) -> Self {
        let config = cfg.to_toml();
        Manifest {
            version: env!("CARGO_PKG_VERSION").into(),
            experiment: cfg.experiment,
            seeds: seeds.to_vec(),
            config_sha256: sha256_hex(&config),
            config,
            layout: Layout { manifest: MANIFEST.into(), metrics: METRICS.into(), summary: SUMMARY.into(), maps: format!("{MAPS}/") },
        }
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse { offset: e.column(), message: e.to_string() })?;
        if sha256_hex(&m.config) != m.config_sha256 {
            return Err(Error::config("config_sha256", "does not match the recorded config"));
        }
        if m.seeds.is_empty() {
            return Err(Error::config("seeds", "manifest lists no seeds"));
        }
        Ok(m)
    }
}

/// Streams metrics to disk as they arrive and keeps them for the summary.
pub struct RunWriter {
    dir: PathBuf,
    csv: BufWriter<File>,
    experiment: Experiment,
    records: Vec<MetricRecord>,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) { format!("\"{}\"", s.replace('"', "\"\"")) } else { s.to_string() }
}

impl RunWriter {
    pub fn create(dir: &Path, cfg: &SimConfig, seeds: &[u64]) -> Result<Self, Error> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let manifest = Manifest::new(cfg, seeds);
        let mpath = dir.join(MANIFEST);
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&mpath, json + "\n").map_err(io_err(&mpath))?;
        let cpath = dir.join(METRICS);
        let mut csv = BufWriter::new(File::create(&cpath).map_err(io_err(&cpath))?);
        writeln!(csv, "{CSV_HEADER}").map_err(io_err(&cpath))?;
        // a stale summary from an earlier run must not survive a crash
        let _ = std::fs::remove_file(dir.join(SUMMARY));
        Ok(RunWriter { dir: dir.to_path_buf(), csv, experiment: cfg.experiment, records: Vec::new() })
    }

    /// Writes `summary.json`; `error` marks the outputs as partial.
    pub fn finish(mut self, error: Option<&str>) -> Result<(), Error> {
        let cpath = self.dir.join(METRICS);
        self.csv.flush().map_err(io_err(&cpath))?;
        let summary = Summary::build(self.experiment, &self.records, error);
        let spath = self.dir.join(SUMMARY);
        let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
        std::fs::write(&spath, json + "\n").map_err(io_err(&spath))
    }
}

/// Records a config failure in an otherwise empty run directory.
pub fn write_config_failure(dir: &Path, experiment: Experiment, error: &str) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let spath = dir.join(SUMMARY);
    let json = serde_json::to_string_pretty(&Summary::build(experiment, &[], Some(error))).expect("summary serializes");
    std::fs::write(&spath, json + "\n").map_err(io_err(&spath))
}

impl MetricSink for RunWriter {
    fn record(&mut self, r: MetricRecord) -> Result<(), Error> {
        let cpath = self.dir.join(METRICS);
        writeln!(self.csv, "{},{},{},{},{},{}", r.seed, r.step, csv_field(&r.mode), csv_field(&r.metric), r.value, r.n_points)
            .map_err(io_err(&cpath))?;
        self.records.push(r);
        Ok(())
    }

    fn raster(&mut self, r: Raster) -> Result<(), Error> {
        let dir = self.dir.join(MAPS);
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let path = dir.join(&r.name);
        std::fs::write(&path, &r.bytes).map_err(io_err(&path))
    }
}

/// Buffers one seed's output so concurrent seeds can be written in order.
#[derive(Default)]
pub struct Buffered {
    pub records: Vec<MetricRecord>,
    pub rasters: Vec<Raster>,
}

impl MetricSink for Buffered {
    fn record(&mut self, r: MetricRecord) -> Result<(), Error> {
        self.records.push(r);
        Ok(())
    }

    fn raster(&mut self, r: Raster) -> Result<(), Error> {
        self.rasters.push(r);
        Ok(())
    }
}

impl Buffered {
    pub fn replay(self, sink: &mut dyn MetricSink) -> Result<(), Error> {
        self.records.into_iter().try_for_each(|r| sink.record(r))?;
        self.rasters.into_iter().try_for_each(|r| sink.raster(r))
    }
}

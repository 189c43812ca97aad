//! CSV outputs and the final-state snapshot.
//!
//! Snapshot directory layout. Every integer is a little-endian `u64`, every
//! value a little-endian `f64`:
//!
//! - `clients.bin`: `m`, `split_index`, then per client `len` and `len` values
//! - `centers.bin`: `K`, `split_index`, then per center `len` and `len` values
//! - `assignment.bin`: `m`, `K`, then the `m x K` one-hot matrix row-major
//! - `map.bin` (absent when no map was fitted): `created_round`, `D'`,
//!   `dim`, the `dim` mean values, then the `D' x dim` matrix row-major
//! - `global_embedding.bin`: `len` and `len` values
//! - `partition.csv`: the partition report
//! - `cluster_trace.csv`: the run's cluster trace

use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::clustering::{Assignment, ClusterSet};
use crate::data::{label_kl, partition_report, DEFAULT_KL_EPSILON};
use crate::engine::{ClusterTraceRow, MetricsRecord, Simulation};
use crate::error::{FedError, Result};
use crate::nn::ParamVector;
use crate::similarity::{l2_distance_squared, lrcos, update_map, ReductionMap};

pub const METRICS_HEADER: &str = "round,mean_acc,std_acc,mean_loss,K,gc_mean,gc_std,ari";
pub const TRACE_HEADER: &str = "round,K,cluster,dist_intra,dist_inter,g_c,member_count";

/// Target dimension used by the similarity report when a snapshot has no map.
pub const REPORT_REDUCTION_DIM: usize = 50;

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.round,
            r.mean_test_accuracy,
            r.std_test_accuracy,
            r.mean_train_loss,
            r.k,
            opt(r.g_c_mean),
            opt(r.g_c_std),
            opt(r.ari)
        )
        .unwrap();
    }
    out
}

pub fn trace_csv(rows: &[ClusterTraceRow]) -> String {
    let mut out = format!("{TRACE_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.round,
            r.k,
            r.cluster,
            r.dist_intra,
            opt(r.dist_inter),
            opt(r.g_c),
            r.member_count
        )
        .unwrap();
    }
    out
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn vector(&mut self, vs: &[f64]) {
        self.usize(vs.len());
        self.f64s(vs);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    name: &'a str,
}

impl Reader<'_> {
    fn take8(&mut self) -> Result<[u8; 8]> {
        if self.bytes.len() < 8 {
            return Err(FedError::Parse(format!("{}: unexpected end of file", self.name)));
        }
        let (head, rest) = self.bytes.split_at(8);
        self.bytes = rest;
        Ok(head.try_into().unwrap())
    }

    fn u64(&mut self) -> Result<u64> {
        self.take8().map(u64::from_le_bytes)
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| FedError::Parse(format!("{}: implausible length {v}", self.name)))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if self.bytes.len() / 8 < n {
            return Err(FedError::Parse(format!("{}: unexpected end of file", self.name)));
        }
        (0..n).map(|_| self.take8().map(f64::from_le_bytes)).collect()
    }

    fn vector(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        self.f64s(n)
    }

    fn finish(self) -> Result<()> {
        if self.bytes.is_empty() {
            Ok(())
        } else {
            Err(FedError::Parse(format!(
                "{}: {} trailing bytes",
                self.name,
                self.bytes.len()
            )))
        }
    }
}

fn param_list(models: &[ParamVector]) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.usize(models.len());
    w.usize(models.first().map_or(0, |p| p.split_index()));
    for p in models {
        w.vector(p.as_slice());
    }
    w.0
}

fn read_param_list(bytes: &[u8], name: &str) -> Result<Vec<ParamVector>> {
    let mut r = Reader { bytes, name };
    let n = r.usize()?;
    let split = r.usize()?;
    let models = (0..n)
        .map(|_| r.vector().and_then(|v| ParamVector::new(v, split)))
        .collect::<Result<_>>()?;
    r.finish()?;
    Ok(models)
}

pub fn encode_assignment(a: &Assignment) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.usize(a.client_count());
    w.usize(a.k());
    w.f64s(a.to_matrix().as_slice().unwrap());
    w.0
}

pub fn decode_assignment(bytes: &[u8]) -> Result<Assignment> {
    let mut r = Reader {
        bytes,
        name: "assignment.bin",
    };
    let m = r.usize()?;
    let k = r.usize()?;
    let values = r.f64s(m * k)?;
    r.finish()?;
    let matrix = Array2::from_shape_vec((m, k), values).map_err(|e| FedError::Parse(e.to_string()))?;
    Assignment::from_matrix(&matrix)
}

pub fn encode_map(map: &ReductionMap) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.u64(map.created_round);
    w.usize(map.dim());
    w.usize(map.input_dim());
    w.f64s(&map.mean);
    w.f64s(&map.matrix.iter().copied().collect::<Vec<_>>());
    w.0
}

pub fn decode_map(bytes: &[u8]) -> Result<ReductionMap> {
    let mut r = Reader {
        bytes,
        name: "map.bin",
    };
    let created_round = r.u64()?;
    let rows = r.usize()?;
    let dim = r.usize()?;
    let mean = r.f64s(dim)?;
    let values = r.f64s(rows * dim)?;
    r.finish()?;
    let matrix = Array2::from_shape_vec((rows, dim), values).map_err(|e| FedError::Parse(e.to_string()))?;
    Ok(ReductionMap {
        matrix,
        mean,
        created_round,
    })
}

/// A client row of `partition.csv`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionRow {
    pub client_id: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub histogram: Vec<usize>,
}

impl PartitionRow {
    pub fn distribution(&self) -> Vec<f64> {
        let total: usize = self.histogram.iter().sum();
        self.histogram
            .iter()
            .map(|&h| if total == 0 { 0.0 } else { h as f64 / total as f64 })
            .collect()
    }
}

pub fn parse_partition_report(text: &str) -> Result<Vec<PartitionRow>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| FedError::Parse("partition report is empty".into()))?;
    let width = header.split(',').count();
    if width < 3 || !header.starts_with("client_id,train_size,test_size") {
        return Err(FedError::Parse(format!("bad partition header `{header}`")));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let fields = line
                .split(',')
                .map(|f| f.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| FedError::Parse(format!("partition row {}: {e}", i + 1)))?;
            if fields.len() != width {
                return Err(FedError::Parse(format!(
                    "partition row {} has {} fields, expected {width}",
                    i + 1,
                    fields.len()
                )));
            }
            Ok(PartitionRow {
                client_id: fields[0],
                train_size: fields[1],
                test_size: fields[2],
                histogram: fields[3..].to_vec(),
            })
        })
        .collect()
}

/// Final state of a run as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub models: Vec<ParamVector>,
    pub clusters: ClusterSet,
    pub assignment: Assignment,
    pub map: Option<ReductionMap>,
    pub global_embedding: Vec<f64>,
    pub partitions: Vec<PartitionRow>,
    pub trace_csv: String,
}

impl Snapshot {
    pub fn from_simulation(sim: &Simulation, trace: &[ClusterTraceRow]) -> Result<Self> {
        Ok(Self {
            models: sim.models(),
            clusters: sim.state.clusters.clone(),
            assignment: sim.state.assignment.clone(),
            map: sim.state.map.clone(),
            global_embedding: sim.state.global_embedding.clone(),
            partitions: parse_partition_report(&partition_report(&sim.partitions()))?,
            trace_csv: trace_csv(trace),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("clients.bin"), param_list(&self.models))?;
        fs::write(dir.join("centers.bin"), param_list(&self.clusters.centers))?;
        fs::write(dir.join("assignment.bin"), encode_assignment(&self.assignment))?;
        let map_path = dir.join("map.bin");
        match &self.map {
            Some(map) => fs::write(map_path, encode_map(map))?,
            None if map_path.exists() => fs::remove_file(map_path)?,
            None => {}
        }
        let mut w = Writer(Vec::new());
        w.vector(&self.global_embedding);
        fs::write(dir.join("global_embedding.bin"), w.0)?;
        fs::write(dir.join("partition.csv"), partition_csv(&self.partitions))?;
        fs::write(dir.join("cluster_trace.csv"), &self.trace_csv)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let bytes = |name: &str| -> Result<Vec<u8>> {
            let mut buf = Vec::new();
            fs::File::open(dir.join(name))
                .map_err(|e| FedError::Parse(format!("{}: {e}", dir.join(name).display())))?
                .read_to_end(&mut buf)?;
            Ok(buf)
        };
        let models = read_param_list(&bytes("clients.bin")?, "clients.bin")?;
        let centers = read_param_list(&bytes("centers.bin")?, "centers.bin")?;
        let assignment = decode_assignment(&bytes("assignment.bin")?)?;
        if assignment.client_count() != models.len() || assignment.k() != centers.len() {
            return Err(FedError::Parse(
                "assignment.bin does not match clients.bin and centers.bin".into(),
            ));
        }
        let map = if dir.join("map.bin").exists() {
            Some(decode_map(&bytes("map.bin")?)?)
        } else {
            None
        };
        let raw = bytes("global_embedding.bin")?;
        let mut r = Reader {
            bytes: &raw,
            name: "global_embedding.bin",
        };
        let global_embedding = r.vector()?;
        r.finish()?;
        let text = |name: &str| -> Result<String> {
            String::from_utf8(bytes(name)?).map_err(|e| FedError::Parse(format!("{name}: {e}")))
        };
        let partitions = parse_partition_report(&text("partition.csv")?)?;
        Ok(Self {
            models,
            clusters: ClusterSet {
                member_counts: assignment.member_counts(),
                centers,
            },
            assignment,
            map,
            global_embedding,
            partitions,
            trace_csv: text("cluster_trace.csv")?,
        })
    }

    /// The stored map, or one fitted on the client models.
    pub fn reduction_map(&self) -> Result<ReductionMap> {
        match &self.map {
            Some(m) => Ok(m.clone()),
            None => update_map(&self.models, REPORT_REDUCTION_DIM, 0),
        }
    }
}

pub fn partition_csv(rows: &[PartitionRow]) -> String {
    let c = rows.first().map_or(0, |r| r.histogram.len());
    let mut out = String::from("client_id,train_size,test_size");
    for k in 0..c {
        write!(out, ",class_{k}").unwrap();
    }
    out.push('\n');
    for r in rows {
        write!(out, "{},{},{}", r.client_id, r.train_size, r.test_size).unwrap();
        for h in &r.histogram {
            write!(out, ",{h}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Wide CSV `block,row,0..m-1` with blocks `lrcos`, `l2` and `kl` (`m`
/// rows each, client against client) and `lrcos_center` (`K` rows, center
/// against client). `kl` is `KL(p_row || p_col)` of training labels.
pub fn similarity_report(snapshot: &Snapshot) -> Result<String> {
    let m = snapshot.models.len();
    let map = snapshot.reduction_map()?;
    let mut out = String::from("block,row");
    for j in 0..m {
        write!(out, ",{j}").unwrap();
    }
    out.push('\n');
    let mut block = |name: &str, rows: usize, cell: &dyn Fn(usize, usize) -> Result<f64>| -> Result<()> {
        for i in 0..rows {
            write!(out, "{name},{i}").unwrap();
            for j in 0..m {
                write!(out, ",{}", cell(i, j)?).unwrap();
            }
            out.push('\n');
        }
        Ok(())
    };
    let models = &snapshot.models;
    block("lrcos", m, &|i, j| lrcos(&models[i], &models[j], &map))?;
    block("l2", m, &|i, j| {
        l2_distance_squared(models[i].as_slice(), models[j].as_slice())
    })?;
    let dists: Vec<Vec<f64>> = snapshot.partitions.iter().map(|p| p.distribution()).collect();
    if dists.len() != m {
        return Err(FedError::Parse(format!(
            "partition report covers {} clients, snapshot has {m}",
            dists.len()
        )));
    }
    block("kl", m, &|i, j| {
        label_kl(&dists[i], &dists[j], DEFAULT_KL_EPSILON)
    })?;
    let centers = &snapshot.clusters.centers;
    block("lrcos_center", centers.len(), &|k, j| {
        lrcos(&centers[k], &models[j], &map)
    })?;
    Ok(out)
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_csv_leaves_missing_fields_empty() {
        let csv = metrics_csv(&[MetricsRecord {
            round: 3,
            mean_test_accuracy: 0.5,
            std_test_accuracy: 0.125,
            mean_train_loss: 1.0,
            k: 1,
            g_c_mean: None,
            g_c_std: None,
            ari: Some(1.0),
        }]);
        assert_eq!(csv, format!("{METRICS_HEADER}\n3,0.5,0.125,1,1,,,1\n"));
    }

    #[test]
    fn assignment_and_map_round_trip() {
        let a = Assignment::new(vec![1, 0, 1, 2], 3).unwrap();
        assert_eq!(decode_assignment(&encode_assignment(&a)).unwrap(), a);
        let map = ReductionMap {
            matrix: Array2::from_shape_vec((2, 3), vec![1.0, 0.0, 0.0, 0.0, -0.5, 0.25]).unwrap(),
            mean: vec![0.1, 0.2, 0.3],
            created_round: 40,
        };
        assert_eq!(decode_map(&encode_map(&map)).unwrap(), map);
    }

    #[test]
    fn truncated_files_are_rejected() {
        let a = Assignment::new(vec![0, 1], 2).unwrap();
        let bytes = encode_assignment(&a);
        assert!(decode_assignment(&bytes[..bytes.len() - 3]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_assignment(&long).is_err());
    }

    #[test]
    fn partition_report_parses_back() {
        let text = "client_id,train_size,test_size,class_0,class_1\n0,8,2,5,3\n1,4,1,0,4\n";
        let rows = parse_partition_report(text).unwrap();
        assert_eq!(rows[1].histogram, vec![0, 4]);
        assert_eq!(partition_csv(&rows), text);
        assert!(parse_partition_report("client_id,train_size,test_size\n1,2\n").is_err());
    }
}

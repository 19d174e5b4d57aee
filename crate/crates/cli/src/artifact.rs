//! Files written by the commands: JSON reports, CSV tables and the binary albedo matrix.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use magrt::albedo::{AlbedoOperator, ColumnMethod, Entries};
use magrt::transport::Csr;
use sha2::{Digest, Sha256};

use crate::error::CliError;
use crate::json::{float, Json};
use crate::scenario::{Scenario, FORMAT_VERSION};

const MAGIC: &[u8; 8] = b"MAGRTALB";

/// Where a command writes and what it stamps on every file.
pub struct Sink {
    pub dir: PathBuf,
    pub stem: String,
    pub csv: bool,
    pub scenario_hash: String,
    pub resolution: String,
    pub seed: u64,
}

impl Sink {
    pub fn new(s: &Scenario, command: &str, dir_override: Option<&Path>) -> Result<Self, CliError> {
        let dir = dir_override.map(Path::to_path_buf).unwrap_or_else(|| s.output.dir.clone());
        std::fs::create_dir_all(&dir)?;
        Ok(Sink {
            dir,
            stem: s.output.prefix.clone().map_or_else(|| command.to_string(), |p| format!("{p}_{command}")),
            csv: s.output.csv,
            scenario_hash: s.hash(),
            resolution: s.resolution(),
            seed: s.run.seed,
        })
    }

    pub fn path(&self, suffix: &str) -> PathBuf {
        self.dir.join(format!("{}{suffix}", self.stem))
    }

    /// Report skeleton with the common header fields.
    pub fn report(&self, command: &str) -> Json {
        Json::obj()
            .field("format_version", FORMAT_VERSION)
            .field("command", command)
            .field("scenario_hash", self.scenario_hash.as_str())
            .field("resolution", self.resolution.as_str())
            .field("seed", self.seed)
    }

    pub fn write_report(&self, report: &Json) -> Result<PathBuf, CliError> {
        let p = self.path(".json");
        std::fs::write(&p, report.render())?;
        Ok(p)
    }

    /// CSV table with a commented header line; skipped when CSV output is off.
    pub fn write_csv(&self, name: &str, columns: &[&str], rows: &[Vec<f64>]) -> Result<Option<PathBuf>, CliError> {
        if !self.csv {
            return Ok(None);
        }
        let p = self.path(&format!("_{name}.csv"));
        let mut s = format!(
            "# format_version={FORMAT_VERSION} scenario_hash={} resolution={}\n{}\n",
            self.scenario_hash,
            self.resolution,
            columns.join(",")
        );
        for r in rows {
            let line: Vec<String> = r.iter().map(|v| float(*v)).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        std::fs::write(&p, s)?;
        Ok(Some(p))
    }
}

pub fn grid_hash(grid_id: &str) -> String {
    hex::encode(Sha256::digest(grid_id.as_bytes()))
}

/// Header fields stored alongside a matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixHeader {
    pub version: u32,
    pub scenario_hash: String,
    pub grid_hash: String,
    pub resolution: String,
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    w.extend_from_slice(&(s.len() as u32).to_le_bytes());
    w.extend_from_slice(s.as_bytes());
}

fn put_f64s(w: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        w.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_matrix(a: &AlbedoOperator, scenario_hash: &str, resolution: &str) -> Vec<u8> {
    let mut w = Vec::new();
    w.extend_from_slice(MAGIC);
    w.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_str(&mut w, scenario_hash);
    put_str(&mut w, &grid_hash(&a.grid_id));
    put_str(&mut w, resolution);
    put_str(&mut w, &a.grid_id);
    w.extend_from_slice(&(a.n_out as u64).to_le_bytes());
    w.extend_from_slice(&(a.n_in as u64).to_le_bytes());
    match a.method {
        ColumnMethod::Delta => {
            w.push(0);
            w.extend_from_slice(&0f64.to_le_bytes());
        }
        ColumnMethod::Mollified(e) => {
            w.push(1);
            w.extend_from_slice(&e.to_le_bytes());
        }
    }
    put_f64s(&mut w, &a.mu_out);
    put_f64s(&mut w, &a.input_norms);
    match &a.entries {
        Entries::Dense(v) => {
            w.push(0);
            put_f64s(&mut w, v);
        }
        Entries::Sparse(c) => {
            w.push(1);
            w.extend_from_slice(&(c.val.len() as u64).to_le_bytes());
            for p in &c.ptr {
                w.extend_from_slice(&(*p as u64).to_le_bytes());
            }
            for i in &c.idx {
                w.extend_from_slice(&i.to_le_bytes());
            }
            put_f64s(&mut w, &c.val);
        }
    }
    w
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        if self.pos + n > self.buf.len() {
            return Err(CliError::Config("matrix file is truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CliError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, CliError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize, CliError> {
        let n = self.u64()? as usize;
        // every stored element takes at least four bytes
        if n > self.buf.len() {
            return Err(CliError::Config("matrix file has an implausible length field".into()));
        }
        Ok(n)
    }
    fn string(&mut self) -> Result<String, CliError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CliError::Config("matrix header is not UTF-8".into()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CliError> {
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn decode_matrix(buf: &[u8]) -> Result<(MatrixHeader, AlbedoOperator), CliError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(CliError::Config("not an albedo matrix file".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CliError::Config(format!("matrix format version {version} is not supported")));
    }
    let scenario_hash = r.string()?;
    let grid_hash_stored = r.string()?;
    let resolution = r.string()?;
    let grid_id = r.string()?;
    if grid_hash(&grid_id) != grid_hash_stored {
        return Err(CliError::Config("matrix grid hash does not match its grid description".into()));
    }
    let n_out = r.len()?;
    let n_in = r.len()?;
    let method = match (r.u8()?, r.f64()?) {
        (0, _) => ColumnMethod::Delta,
        (1, e) => ColumnMethod::Mollified(e),
        (m, _) => return Err(CliError::Config(format!("unknown column method {m}"))),
    };
    let mu_out = r.f64s(n_out)?;
    let input_norms = r.f64s(n_in)?;
    let entries = match r.u8()? {
        0 => Entries::Dense(r.f64s(n_out.checked_mul(n_in).ok_or_else(|| CliError::Config("matrix too large".into()))?)?),
        1 => {
            let nnz = r.len()?;
            let ptr = (0..=n_out).map(|_| r.u64().map(|p| p as usize)).collect::<Result<Vec<_>, _>>()?;
            let idx = (0..nnz).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
            let val = r.f64s(nnz)?;
            if ptr.last() != Some(&nnz) || ptr.windows(2).any(|w| w[0] > w[1]) || idx.iter().any(|&i| i as usize >= n_in) {
                return Err(CliError::Config("matrix sparsity structure is inconsistent".into()));
            }
            Entries::Sparse(Csr { ptr, idx, val })
        }
        k => return Err(CliError::Config(format!("unknown storage kind {k}"))),
    };
    if r.pos != buf.len() {
        return Err(CliError::Config("trailing bytes after matrix".into()));
    }
    let header = MatrixHeader { version, scenario_hash, grid_hash: grid_hash_stored, resolution };
    Ok((header, AlbedoOperator { n_out, n_in, entries, mu_out, input_norms, method, grid_id }))
}

pub fn write_matrix(path: &Path, a: &AlbedoOperator, scenario_hash: &str, resolution: &str) -> Result<(), CliError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_matrix(a, scenario_hash, resolution))?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<(MatrixHeader, AlbedoOperator), CliError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| CliError::Config(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut buf)?;
    decode_matrix(&buf)
}

//! CSV and JSON emitters; every file starts with the same provenance header.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nlfrac::Field;
use serde::Serialize;

use crate::error::CliError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, Serialize)]
pub struct Header {
    pub artifact: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
}

pub struct Output {
    dir: PathBuf,
    header: Header,
    written: Vec<PathBuf>,
}

/// 17 significant digits.
pub fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

impl Output {
    pub fn new(dir: &Path, command: &str, config_sha256: String, seed: u64) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
        let header = Header { artifact: "nlfrac", version: VERSION, command: command.into(), config_sha256, seed };
        Ok(Self { dir: dir.to_path_buf(), header, written: Vec::new() })
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    fn create(&mut self, name: &str) -> Result<(PathBuf, BufWriter<File>), CliError> {
        let path = self.dir.join(name);
        let file = File::create(&path).map_err(|e| io_error(&path, e))?;
        self.written.push(path.clone());
        Ok((path, BufWriter::new(file)))
    }

    fn comment_block(&self, out: &mut impl Write) -> std::io::Result<()> {
        let h = &self.header;
        writeln!(out, "# {} {}", h.artifact, h.version)?;
        writeln!(out, "# command: {}", h.command)?;
        writeln!(out, "# config_sha256: {}", h.config_sha256)?;
        writeln!(out, "# seed: {}", h.seed)
    }

    /// Columns `index…, x…, value` in row-major node order.
    pub fn field_csv(&mut self, name: &str, field: &Field) -> Result<(), CliError> {
        let grid = field.grid().clone();
        let dim = grid.dim();
        let mut columns: Vec<String> = (0..dim).map(|d| format!("index{d}")).collect();
        columns.extend((0..dim).map(|d| format!("x{d}")));
        columns.push("value".into());
        let rows = (0..grid.num_nodes()).map(|i| {
            let mut row: Vec<String> = grid.node_multi_index(i).iter().map(|j| j.to_string()).collect();
            row.extend(grid.coords(i).into_iter().map(fmt));
            row.push(fmt(field.values()[i]));
            row
        });
        self.table_csv(name, &columns, rows)
    }

    pub fn table_csv<S: AsRef<str>>(
        &mut self,
        name: &str,
        columns: &[S],
        rows: impl IntoIterator<Item = Vec<String>>,
    ) -> Result<(), CliError> {
        let (path, mut file) = self.create(name)?;
        self.comment_block(&mut file).map_err(|e| io_error(&path, e))?;
        let mut writer = csv::Writer::from_writer(file);
        writer.write_record(columns.iter().map(|c| c.as_ref())).map_err(|e| io_error(&path, e))?;
        for row in rows {
            writer.write_record(&row).map_err(|e| io_error(&path, e))?;
        }
        writer.flush().map_err(|e| io_error(&path, e))
    }

    /// `{"header": …, "report": …}`
    pub fn json<T: Serialize>(&mut self, name: &str, report: &T) -> Result<(), CliError> {
        #[derive(Serialize)]
        struct Doc<'a, T> {
            header: &'a Header,
            report: &'a T,
        }
        let (path, mut file) = self.create(name)?;
        let doc = Doc { header: &self.header, report };
        serde_json::to_writer_pretty(&mut file, &doc).map_err(|e| io_error(&path, e))?;
        writeln!(file).and_then(|_| file.flush()).map_err(|e| io_error(&path, e))
    }
}

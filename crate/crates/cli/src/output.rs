//! Output directory handling. Files are written to a temporary name and
//! renamed into place, so a reader never sees a half-written file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::CliError;

pub struct OutputDir {
    root: PathBuf,
}

impl OutputDir {
    /// Creates `root` if needed and checks that it accepts new files.
    pub fn prepare(root: &Path) -> Result<Self, CliError> {
        let fail = |e: std::io::Error| {
            CliError::Config(format!("output directory {} is not writable: {e}", root.display()))
        };
        fs::create_dir_all(root).map_err(fail)?;
        let probe = root.join(format!(".write-probe-{}", std::process::id()));
        fs::File::create(&probe).map_err(fail)?;
        fs::remove_file(&probe).map_err(fail)?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let dest = self.path(name);
        let tmp = self.path(&format!(".{name}.tmp"));
        let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", dest.display()));
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(bytes).map_err(io)?;
        f.sync_all().map_err(io)?;
        fs::rename(&tmp, &dest).map_err(io)?;
        Ok(dest)
    }

    pub fn write_json<T: serde::Serialize>(&self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        let mut text = serde_json::to_string_pretty(value).expect("serializable");
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn write_jsonl<T: serde::Serialize>(&self, name: &str, rows: &[T]) -> Result<PathBuf, CliError> {
        let text: String = rows
            .iter()
            .map(|r| serde_json::to_string(r).expect("serializable") + "\n")
            .collect();
        self.write(name, text.as_bytes())
    }
}

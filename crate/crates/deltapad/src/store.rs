//! One JSON file per session under `<data_dir>/sessions`.

use std::io::Write;
use std::path::{Path, PathBuf};

use deltapad_core::experiment::Session;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("invalid session id {0:?}")]
    BadId(String),
}

#[derive(Debug, Clone)]
pub struct SessionStore {
    dir: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

impl SessionStore {
    pub fn open(data_dir: &Path) -> Result<Self, StoreError> {
        let dir = data_dir.join("sessions");
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, id: &str) -> Result<PathBuf, StoreError> {
        let ok = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        if !ok {
            return Err(StoreError::BadId(id.to_string()));
        }
        Ok(self.dir.join(format!("{id}.json")))
    }

    /// Write through a temporary file so a crash never leaves half a session.
    pub fn save(&self, session: &Session) -> Result<(), StoreError> {
        let path = self.path(&session.id)?;
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_vec_pretty(session).map_err(|source| StoreError::Parse { path: path.clone(), source })?;
        let mut f = std::fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(&text).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
        std::fs::rename(&tmp, &path).map_err(io_err(&path))?;
        Ok(())
    }

    pub fn load(&self, id: &str) -> Result<Session, StoreError> {
        load_file(&self.path(id)?)
    }

    /// All sessions, sorted by id.
    pub fn load_all(&self) -> Result<Vec<Session>, StoreError> {
        load_dir(&self.dir)
    }
}

pub fn load_file(path: &Path) -> Result<Session, StoreError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| StoreError::Parse { path: path.to_path_buf(), source })
}

/// Every `*.json` session in `dir`, sorted by id.
pub fn load_dir(dir: &Path) -> Result<Vec<Session>, StoreError> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.extension().is_some_and(|e| e == "json") {
            out.push(load_file(&path)?);
        }
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use deltapad_core::experiment::SessionSpec;
    use deltapad_core::patterns::Mode;

    #[test]
    fn save_and_reload() {
        let tmp = tempfile::tempdir().unwrap();
        let store = SessionStore::open(tmp.path()).unwrap();
        let s = Session::new("abc-1", SessionSpec::new(Mode::Stretch, "S1", 4), 17).unwrap();
        store.save(&s).unwrap();
        assert_eq!(store.load("abc-1").unwrap(), s);
        let again = SessionStore::open(tmp.path()).unwrap();
        assert_eq!(again.load_all().unwrap(), vec![s]);
        assert!(!store.dir().join("abc-1.json.tmp").exists());
    }

    #[test]
    fn ids_cannot_escape_the_directory() {
        let tmp = tempfile::tempdir().unwrap();
        let store = SessionStore::open(tmp.path()).unwrap();
        for bad in ["../x", "a/b", "", "x.json"] {
            assert!(matches!(store.path(bad), Err(StoreError::BadId(_))), "{bad}");
        }
    }

    #[test]
    fn corrupt_file_is_an_error() {
        let tmp = tempfile::tempdir().unwrap();
        let store = SessionStore::open(tmp.path()).unwrap();
        std::fs::write(store.dir().join("bad.json"), "{").unwrap();
        assert!(matches!(store.load_all(), Err(StoreError::Parse { .. })));
    }
}

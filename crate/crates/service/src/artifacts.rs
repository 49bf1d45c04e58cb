//! Content-addressed artifact files: `{sha256}.{ext}` in one flat directory.

use std::io::Write;
use std::path::{Path, PathBuf};

use modalgate_core::backends::MediaArtifact;
use modalgate_core::digest::sha256_hex;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ArtifactRef {
    pub id: String,
    pub mime: String,
    pub len: u64,
    #[serde(skip)]
    pub path: PathBuf,
}

impl ArtifactRef {
    pub fn url(&self) -> String {
        format!("/v1/artifacts/{}", self.id)
    }
}

const MIME_EXT: [(&str, &str); 7] = [
    ("image/png", "png"),
    ("image/jpeg", "jpg"),
    ("image/webp", "webp"),
    ("audio/wav", "wav"),
    ("audio/x-wav", "wav"),
    ("audio/mpeg", "mp3"),
    ("audio/ogg", "ogg"),
];

fn ext_for(mime: &str) -> &'static str {
    MIME_EXT.iter().find(|(m, _)| *m == mime).map_or("bin", |(_, e)| e)
}

fn mime_for(ext: &str) -> &'static str {
    MIME_EXT
        .iter()
        .find(|(_, e)| *e == ext)
        .map_or("application/octet-stream", |(m, _)| m)
}

pub fn is_artifact_id(id: &str) -> bool {
    id.len() == 64 && id.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

#[derive(Debug, Clone)]
pub struct ArtifactStore {
    dir: PathBuf,
}

impl ArtifactStore {
    pub fn open(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Stores the bytes once; repeated puts of the same content are no-ops.
    pub fn put(&self, artifact: &MediaArtifact) -> std::io::Result<ArtifactRef> {
        let id = sha256_hex(&artifact.bytes);
        let path = self.dir.join(format!("{id}.{}", ext_for(&artifact.mime)));
        if !path.exists() {
            let tmp = self.dir.join(format!(".{id}.{}.tmp", uuid::Uuid::new_v4().simple()));
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&artifact.bytes)?;
            f.sync_all()?;
            std::fs::rename(&tmp, &path)?;
        }
        Ok(ArtifactRef {
            id,
            mime: mime_for(ext_for(&artifact.mime)).to_string(),
            len: artifact.bytes.len() as u64,
            path,
        })
    }

    fn locate(&self, id: &str) -> Option<PathBuf> {
        if !is_artifact_id(id) {
            return None;
        }
        let mut exts: Vec<&str> = MIME_EXT.iter().map(|(_, e)| *e).collect();
        exts.push("bin");
        exts.into_iter()
            .map(|e| self.dir.join(format!("{id}.{e}")))
            .find(|p| p.is_file())
    }

    /// Returns the bytes and mime, or `None` for unknown ids and files whose
    /// digest no longer matches their name.
    pub fn get(&self, id: &str) -> std::io::Result<Option<(Vec<u8>, String)>> {
        let Some(path) = self.locate(id) else {
            return Ok(None);
        };
        let bytes = std::fs::read(&path)?;
        if sha256_hex(&bytes) != id {
            tracing::warn!(id, "artifact digest mismatch");
            return Ok(None);
        }
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("bin");
        Ok(Some((bytes, mime_for(ext).to_string())))
    }
}

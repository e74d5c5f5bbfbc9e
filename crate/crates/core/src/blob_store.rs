//! Content-addressed, filesystem-backed image storage.
//!
//! Layout: `<root>/<digest[0..2]>/<digest>.<ext>`. Blobs are published with a
//! no-clobber link from a temp file, so concurrent writers of the same digest
//! both succeed and readers never see partial files.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::trajectory::{is_valid_digest, ImageRef};

#[derive(Debug, Error)]
pub enum BlobError {
    #[error("refusing to store an empty blob")]
    Empty,
    #[error("blob {0} not found")]
    NotFound(String),
    #[error("blob {digest} is corrupt (content hashes to {actual})")]
    Corrupt { digest: String, actual: String },
    #[error("invalid digest {0:?}")]
    BadDigest(String),
    #[error("blob store i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn extension_for(media_type: &str) -> &'static str {
    match media_type {
        "image/png" => "png",
        "image/jpeg" | "image/jpg" => "jpg",
        "image/webp" => "webp",
        "image/gif" => "gif",
        "image/x-portable-graymap" => "pgm",
        _ => "bin",
    }
}

#[derive(Debug)]
pub struct BlobStore {
    root: PathBuf,
    created: AtomicU64,
}

impl BlobStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, BlobError> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(BlobStore {
            root,
            created: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, digest: &str, media_type: &str) -> PathBuf {
        self.root
            .join(&digest[..2])
            .join(format!("{digest}.{}", extension_for(media_type)))
    }

    /// Number of blobs this handle created (puts of already-present content are not counted).
    pub fn created_count(&self) -> u64 {
        self.created.load(Ordering::SeqCst)
    }

    pub fn put(&self, bytes: &[u8], media_type: &str) -> Result<ImageRef, BlobError> {
        if bytes.is_empty() {
            return Err(BlobError::Empty);
        }
        let digest = sha256_hex(bytes);
        let image = ImageRef::new(digest.clone(), media_type).expect("sha256 hex is a valid digest");
        let path = self.path_for(&digest, media_type);
        if path.exists() {
            return Ok(image);
        }
        let shard = path.parent().expect("sharded path has a parent");
        std::fs::create_dir_all(shard)?;
        let mut tmp = tempfile::NamedTempFile::new_in(shard)?;
        tmp.write_all(bytes)?;
        tmp.as_file().sync_all()?;
        match tmp.persist_noclobber(&path) {
            Ok(_) => {
                self.created.fetch_add(1, Ordering::SeqCst);
            }
            // Another writer published identical content first.
            Err(e) if e.error.kind() == std::io::ErrorKind::AlreadyExists => {}
            Err(e) => return Err(e.error.into()),
        }
        Ok(image)
    }

    pub fn contains(&self, image: &ImageRef) -> bool {
        self.locate(image).is_some()
    }

    fn locate(&self, image: &ImageRef) -> Option<PathBuf> {
        if !is_valid_digest(&image.digest) {
            return None;
        }
        let exact = self.path_for(&image.digest, &image.media_type);
        if exact.exists() {
            return Some(exact);
        }
        // Same content stored under a different media type.
        let prefix = format!("{}.", image.digest);
        std::fs::read_dir(self.root.join(&image.digest[..2]))
            .ok()?
            .filter_map(Result::ok)
            .find(|e| e.file_name().to_string_lossy().starts_with(&prefix))
            .map(|e| e.path())
    }

    pub fn get(&self, image: &ImageRef) -> Result<Vec<u8>, BlobError> {
        if !is_valid_digest(&image.digest) {
            return Err(BlobError::BadDigest(image.digest.clone()));
        }
        let path = self
            .locate(image)
            .ok_or_else(|| BlobError::NotFound(image.digest.clone()))?;
        let bytes = std::fs::read(path)?;
        let actual = sha256_hex(&bytes);
        if actual != image.digest {
            return Err(BlobError::Corrupt {
                digest: image.digest.clone(),
                actual,
            });
        }
        Ok(bytes)
    }
}

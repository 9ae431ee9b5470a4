//! Little-endian binary IO helpers shared by the four on-disk formats.
//!
//! Every artifact starts with a 4-byte ASCII magic and a u32 version.
//! Numeric payloads are little-endian f32/u32 regardless of host order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::LaError;
use crate::Result;

pub(crate) struct ArtifactWriter {
    inner: BufWriter<File>,
    path: std::path::PathBuf,
}

impl ArtifactWriter {
    pub fn create(path: &Path, magic: &[u8; 4], version: u32) -> Result<Self> {
        let file = File::create(path).map_err(|e| LaError::io(path, e))?;
        let mut w = ArtifactWriter {
            inner: BufWriter::new(file),
            path: path.to_path_buf(),
        };
        w.inner
            .write_all(magic)
            .map_err(|e| LaError::io(path, e))?;
        w.write_u32(version)?;
        Ok(w)
    }

    pub fn write_u32(&mut self, v: u32) -> Result<()> {
        self.inner
            .write_u32::<LittleEndian>(v)
            .map_err(|e| LaError::io(&self.path, e))
    }

    pub fn write_u8(&mut self, v: u8) -> Result<()> {
        self.inner
            .write_u8(v)
            .map_err(|e| LaError::io(&self.path, e))
    }

    pub fn write_f32_slice(&mut self, vs: &[f32]) -> Result<()> {
        for &v in vs {
            self.inner
                .write_f32::<LittleEndian>(v)
                .map_err(|e| LaError::io(&self.path, e))?;
        }
        Ok(())
    }

    pub fn write_u32_slice(&mut self, vs: &[u32]) -> Result<()> {
        for &v in vs {
            self.write_u32(v)?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush().map_err(|e| LaError::io(&self.path, e))
    }
}

pub(crate) struct ArtifactReader {
    inner: BufReader<File>,
    path: std::path::PathBuf,
}

impl ArtifactReader {
    /// Opens the file and checks magic and version before any payload read.
    pub fn open(path: &Path, magic: &[u8; 4], expect_version: u32) -> Result<Self> {
        let file = File::open(path).map_err(|e| LaError::io(path, e))?;
        let mut r = ArtifactReader {
            inner: BufReader::new(file),
            path: path.to_path_buf(),
        };
        let mut got = [0u8; 4];
        r.inner
            .read_exact(&mut got)
            .map_err(|e| LaError::io(path, e))?;
        if &got != magic {
            return Err(LaError::format(
                path,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(&got),
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        let version = r.read_u32()?;
        if version != expect_version {
            return Err(LaError::format(
                path,
                format!("unsupported version {version}, expected {expect_version}"),
            ));
        }
        Ok(r)
    }

    pub fn read_u32(&mut self) -> Result<u32> {
        self.inner
            .read_u32::<LittleEndian>()
            .map_err(|e| LaError::io(&self.path, e))
    }

    pub fn read_u8(&mut self) -> Result<u8> {
        self.inner
            .read_u8()
            .map_err(|e| LaError::io(&self.path, e))
    }

    pub fn read_f32_vec(&mut self, len: usize) -> Result<Vec<f32>> {
        let mut out = vec![0f32; len];
        self.inner
            .read_f32_into::<LittleEndian>(&mut out)
            .map_err(|e| LaError::io(&self.path, e))?;
        Ok(out)
    }

    pub fn read_u32_vec(&mut self, len: usize) -> Result<Vec<u32>> {
        let mut out = vec![0u32; len];
        self.inner
            .read_u32_into::<LittleEndian>(&mut out)
            .map_err(|e| LaError::io(&self.path, e))?;
        Ok(out)
    }

    /// Errors if any payload bytes remain unread.
    pub fn expect_eof(mut self) -> Result<()> {
        let mut buf = [0u8; 1];
        match self.inner.read(&mut buf) {
            Ok(0) => Ok(()),
            Ok(_) => Err(LaError::format(&self.path, "trailing bytes after payload")),
            Err(e) => Err(LaError::io(&self.path, e)),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

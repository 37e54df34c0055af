//! Flat binary archive for named tensors plus string metadata. Little-endian
//! f64 payloads preserve values bit-for-bit, which checkpoint resume relies
//! on.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

const MAGIC: &[u8; 8] = b"TNSRAR1\n";

/// Named tensors and key/value metadata, written and read in order.
#[derive(Default)]
pub struct Archive {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, ArrayD<f64>)>,
}

impl Archive {
    pub fn new() -> Self {
        Archive::default()
    }

    pub fn put_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.push((key.to_string(), value.to_string()));
    }

    pub fn get_meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn put_tensor(&mut self, name: &str, t: ArrayD<f64>) {
        self.tensors.push((name.to_string(), t));
    }

    pub fn get_tensor(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        write_u64(&mut w, self.meta.len() as u64)?;
        for (k, v) in &self.meta {
            write_str(&mut w, k)?;
            write_str(&mut w, v)?;
        }
        write_u64(&mut w, self.tensors.len() as u64)?;
        for (name, t) in &self.tensors {
            write_str(&mut w, name)?;
            let shape = t.shape();
            write_u64(&mut w, shape.len() as u64)?;
            for &d in shape {
                write_u64(&mut w, d as u64)?;
            }
            let std = t.as_standard_layout();
            for &v in std.as_slice().unwrap() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn load(path: &Path) -> io::Result<Archive> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "not a tensor archive"));
        }
        let nmeta = read_u64(&mut r)? as usize;
        let mut meta = Vec::with_capacity(nmeta);
        for _ in 0..nmeta {
            let k = read_str(&mut r)?;
            let v = read_str(&mut r)?;
            meta.push((k, v));
        }
        let ntensors = read_u64(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(ntensors);
        for _ in 0..ntensors {
            let name = read_str(&mut r)?;
            let ndim = read_u64(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&mut r)? as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = vec![0f64; len];
            let mut buf = [0u8; 8];
            for v in data.iter_mut() {
                r.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
            let t = ArrayD::from_shape_vec(IxDyn(&shape), data)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
            tensors.push((name, t));
        }
        Ok(Archive { meta, tensors })
    }
}

fn write_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn write_str(w: &mut impl Write, s: &str) -> io::Result<()> {
    let b = s.as_bytes();
    write_u64(w, b.len() as u64)?;
    w.write_all(b)
}

fn read_str(r: &mut impl Read) -> io::Result<String> {
    let len = read_u64(r)? as usize;
    if len > 1 << 24 {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "string too long"));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))
}

//! Dense row-major tensors of 32-bit reals, plus the `BFMT` binary format
//! used by checkpoints and dataset files.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};

const BFMT_MAGIC: [u8; 4] = *b"BFMT";
const BFMT_VERSION: u32 = 1;

/// Dense multi-dimensional array of `f32` in row-major order.
///
/// `grad_enabled` marks the tensor as a differentiable leaf when it is
/// registered on a [`crate::tape::Tape`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad_enabled: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(CoreError::Shape(format!(
                "zero-sized dimension in shape {shape:?}"
            )));
        }
        if data.len() != numel {
            return Err(CoreError::Shape(format!(
                "data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad_enabled: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            grad_enabled: false,
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            grad_enabled: false,
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            grad_enabled: false,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.grad_enabled = true;
        self
    }

    pub fn set_grad_enabled(&mut self, enabled: bool) {
        self.grad_enabled = enabled;
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Element access for rank-2 tensors.
    pub fn at2(&self, row: usize, col: usize) -> f32 {
        debug_assert_eq!(self.rank(), 2);
        self.data[row * self.shape[1] + col]
    }

    pub fn set2(&mut self, row: usize, col: usize, v: f32) {
        debug_assert_eq!(self.rank(), 2);
        self.data[row * self.shape[1] + col] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret the data under a new shape with the same element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(CoreError::Shape(format!(
                "cannot reshape {:?} ({} elements) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        let mut t = self.clone();
        t.shape = shape;
        Ok(t)
    }

    /// Serialize in BFMT framing to a writer.
    pub fn write_bfmt<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&BFMT_MAGIC)?;
        w.write_all(&BFMT_VERSION.to_le_bytes())?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Read one BFMT-framed tensor from a reader.
    pub fn read_bfmt<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "magic")?;
        if magic != BFMT_MAGIC {
            return Err(CoreError::Format(format!(
                "bad magic {magic:?}, expected BFMT"
            )));
        }
        let version = read_u32(r, "version")?;
        if version != BFMT_VERSION {
            return Err(CoreError::Format(format!(
                "unsupported BFMT version {version}"
            )));
        }
        let rank = read_u32(r, "rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(CoreError::Format(format!("unreasonable rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let d = read_u64(r, "dim")?;
            if d == 0 {
                return Err(CoreError::Format("zero dimension".into()));
            }
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| CoreError::Format("dimension overflow".into()))?;
            shape.push(d as usize);
        }
        if numel > (1 << 31) {
            return Err(CoreError::Format(format!("payload too large: {numel}")));
        }
        let mut data = vec![0.0f32; numel as usize];
        let mut buf = [0u8; 4];
        for slot in data.iter_mut() {
            read_exact(r, &mut buf, "payload")?;
            *slot = f32::from_le_bytes(buf);
        }
        Tensor::new(shape, data)
    }

    pub fn save_bfmt<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_bfmt(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load_bfmt<P: AsRef<Path>>(path: P) -> Result<Tensor> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Tensor::read_bfmt(&mut f)
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| CoreError::Format(format!("truncated file while reading {what}")))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf, what)?;
    Ok(u64::from_le_bytes(buf))
}

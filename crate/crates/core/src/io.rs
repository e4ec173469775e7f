//! The `ARFT` tensor file format.
//!
//! Layout: magic `ARFT`, version byte (1), dtype byte (0 = f32, 1 = f64),
//! rank byte, `rank` little-endian u32 extents, then the row-major values
//! in little-endian order.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"ARFT";
pub const TENSOR_VERSION: u8 = 1;

pub fn write_tensor<W: Write>(w: &mut W, tensor: &Tensor, dtype: DType) -> Result<()> {
    let rank = u8::try_from(tensor.rank()).map_err(|_| Error::Format(format!("rank {} too large", tensor.rank())))?;
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&[TENSOR_VERSION, dtype_code(dtype), rank])?;
    for &d in tensor.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(tensor.numel() * 8);
    match dtype {
        DType::F32 => tensor.data().iter().for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => tensor.data().iter().for_each(|&v| buf.extend_from_slice(&v.to_le_bytes())),
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn encode_tensor(tensor: &Tensor, dtype: DType) -> Vec<u8> {
    let mut out = Vec::new();
    write_tensor(&mut out, tensor, dtype).expect("writing to a Vec cannot fail");
    out
}

fn dtype_code(dtype: DType) -> u8 {
    match dtype {
        DType::F32 => 0,
        DType::F64 => 1,
    }
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated tensor".into()),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<(Tensor, DType)> {
    let magic: [u8; 4] = read_exact(r)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let [version, dtype, rank] = read_exact::<_, 3>(r)?;
    if version != TENSOR_VERSION {
        return Err(Error::Format(format!("unsupported tensor version {version}")));
    }
    let dtype = match dtype {
        0 => DType::F32,
        1 => DType::F64,
        other => return Err(Error::Format(format!("unknown dtype code {other}"))),
    };
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        shape.push(u32::from_le_bytes(read_exact(r)?) as usize);
    }
    let n: usize = shape.iter().product();
    let width = if dtype == DType::F32 { 4 } else { 8 };
    let mut raw = vec![0u8; n * width];
    r.read_exact(&mut raw).map_err(|_| Error::Format("truncated tensor data".into()))?;
    let data = match dtype {
        DType::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        DType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
    };
    Ok((Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?, dtype))
}

pub fn save_tensor(path: &Path, tensor: &Tensor, dtype: DType) -> Result<()> {
    std::fs::write(path, encode_tensor(tensor, dtype))?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let mut cursor = bytes.as_slice();
    let (t, _) = read_tensor(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes in {}", cursor.len(), path.display())));
    }
    Ok(t)
}

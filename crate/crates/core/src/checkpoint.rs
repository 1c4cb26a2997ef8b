//! Binary checkpoint: a versioned architecture header followed by the parameter
//! tensors, each prefixed by its shape.
//!
//! ```text
//! magic   b"AGNNCKPT"
//! u32     format version (1)
//! u8      model kind (0 = GLN, 1 = GCN, 2 = AGNN)
//! u32 ×4  layers, hidden width, input dim, class count
//! u8      freeze-first-beta flag
//! f64     dropout rate
//! then for W0, W1 and each β:  u64 rows, u64 cols, rows·cols f64 (row-major)
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::{ModelKind, ModelParams, ModelSpec};

const MAGIC: &[u8; 8] = b"AGNNCKPT";
const VERSION: u32 = 1;

fn kind_code(kind: ModelKind) -> u8 {
    match kind {
        ModelKind::Gln => 0,
        ModelKind::Gcn => 1,
        ModelKind::Agnn => 2,
    }
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_tensor<W: Write>(w: &mut W, t: &Array2<f64>) -> io::Result<()> {
    w.write_all(&(t.nrows() as u64).to_le_bytes())?;
    w.write_all(&(t.ncols() as u64).to_le_bytes())?;
    for v in t.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_checkpoint<W: Write>(mut w: W, spec: &ModelSpec, params: &ModelParams) -> Result<()> {
    params.check_shapes(spec)?;
    let io = |e| Error::io("<checkpoint>", e);
    let dims = [spec.layers, spec.hidden, spec.input_dim, spec.num_classes];
    let mut body = || -> io::Result<()> {
        w.write_all(MAGIC)?;
        write_u32(&mut w, VERSION)?;
        w.write_all(&[kind_code(spec.kind)])?;
        for d in dims {
            write_u32(&mut w, u32::try_from(d).map_err(|_| io::Error::other("dimension exceeds u32"))?)?;
        }
        w.write_all(&[u8::from(spec.freeze_first_beta)])?;
        w.write_all(&spec.dropout.to_le_bytes())?;
        for t in params.tensors() {
            write_tensor(&mut w, &t)?;
        }
        w.flush()
    };
    body().map_err(io)
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Input(format!("truncated checkpoint: {e}")))?;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn tensor(&mut self, expect: (usize, usize)) -> Result<Array2<f64>> {
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        if (rows, cols) != expect {
            return Err(Error::Input(format!(
                "checkpoint tensor is {rows}x{cols}, header implies {}x{}",
                expect.0, expect.1
            )));
        }
        let values = (0..rows * cols).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok(Array2::from_shape_vec((rows, cols), values).expect("length matches shape"))
    }
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<(ModelSpec, ModelParams)> {
    let mut r = Reader { inner: r };
    if &r.bytes::<8>()? != MAGIC {
        return Err(Error::Input("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Input(format!("unsupported checkpoint version {version}")));
    }
    let kind = match r.u8()? {
        0 => ModelKind::Gln,
        1 => ModelKind::Gcn,
        2 => ModelKind::Agnn,
        k => return Err(Error::Input(format!("unknown model kind code {k}"))),
    };
    let layers = r.u32()? as usize;
    let hidden = r.u32()? as usize;
    let input_dim = r.u32()? as usize;
    let num_classes = r.u32()? as usize;
    let freeze_first_beta = r.u8()? != 0;
    let dropout = r.f64()?;
    let spec = ModelSpec {
        kind,
        layers,
        hidden,
        input_dim,
        num_classes,
        freeze_first_beta,
        dropout,
    };
    spec.validate()?;
    let w0 = r.tensor((input_dim + 1, hidden))?;
    let w1 = r.tensor((hidden + 1, num_classes))?;
    let n_betas = if kind == ModelKind::Agnn { layers } else { 0 };
    let betas = (0..n_betas)
        .map(|_| r.tensor((1, 1)).map(|t| t[[0, 0]]))
        .collect::<Result<Vec<_>>>()?;
    let mut trailing = [0u8; 1];
    if r.inner.read(&mut trailing).map_err(|e| Error::io("<checkpoint>", e))? != 0 {
        return Err(Error::Input("trailing bytes after checkpoint".into()));
    }
    Ok((spec, ModelParams { w0, w1, betas }))
}

pub fn save(path: impl AsRef<Path>, spec: &ModelSpec, params: &ModelParams) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, spec, params)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(ModelSpec, ModelParams)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut spec = ModelSpec::new(ModelKind::Agnn, 7, 3);
        spec.layers = 3;
        spec.freeze_first_beta = true;
        let mut params = init_params(&spec, 2).unwrap();
        params.betas[2] = -0.123456789;
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &spec, &params).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        let (s, p) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(s, spec);
        assert_eq!(p, params);
        // header 8 + 4 + 1 + 16 + 1 + 8, then (16 + 8·len) per tensor
        let expect = 38 + (16 + 8 * 8 * 16) + (16 + 8 * 17 * 3) + 3 * (16 + 8);
        assert_eq!(buf.len(), expect);
    }

    #[test]
    fn corrupt_inputs() {
        let spec = ModelSpec::new(ModelKind::Gln, 4, 2);
        let params = init_params(&spec, 0).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &spec, &params).unwrap();
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_checkpoint(extra.as_slice()).is_err());
    }
}

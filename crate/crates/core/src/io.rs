//! Binary tensor files used as benchmark fixtures.
//!
//! A 32-byte little-endian header followed by the elements in physical order:
//!
//! | bytes  | field                                          |
//! |--------|------------------------------------------------|
//! | 0..4   | magic `ODLT`                                   |
//! | 4      | element tag: 0 = f32, 1 = IEEE f16, 2 = bf16   |
//! | 5      | layout: 0 = CHW, 1 = HWC                       |
//! | 6      | kind: 0 = activation, 1 = weight               |
//! | 7      | flags: bit 0 = transposed weights              |
//! | 8..24  | four u32 dims (`c,h,w,1` or `c_out,c_in,kh,kw`) |
//! | 24..32 | u64 element count                              |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use half::{bf16, f16};

use crate::elem::{half_flavor, HalfFlavor};
use crate::error::{Error, Result};
use crate::tensor::{Buffer, Dims, Layout, Tensor};

const MAGIC: &[u8; 4] = b"ODLT";
pub const HEADER_BYTES: usize = 32;

pub fn write_tensor<W: Write>(mut out: W, t: &Tensor) -> Result<()> {
    let mut h = [0u8; HEADER_BYTES];
    h[..4].copy_from_slice(MAGIC);
    h[4] = match t.buffer() {
        Buffer::F32(_) => 0,
        Buffer::F16(_) => 1,
        Buffer::Bf16(_) => 2,
    };
    h[5] = match t.layout() {
        Layout::Chw => 0,
        Layout::Hwc => 1,
    };
    h[6] = u8::from(t.is_weight());
    h[7] = u8::from(t.is_transposed());
    for (i, d) in t.dims().as_array().iter().enumerate() {
        let d = u32::try_from(*d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        h[8 + 4 * i..12 + 4 * i].copy_from_slice(&d.to_le_bytes());
    }
    h[24..32].copy_from_slice(&(t.len() as u64).to_le_bytes());
    out.write_all(&h)?;
    let payload: Vec<u8> = match t.buffer() {
        Buffer::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        Buffer::F16(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        Buffer::Bf16(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
    };
    out.write_all(&payload)?;
    Ok(())
}

pub fn read_tensor<R: Read>(mut input: R) -> Result<Tensor> {
    let mut h = [0u8; HEADER_BYTES];
    input.read_exact(&mut h)?;
    if &h[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let layout = match h[5] {
        0 => Layout::Chw,
        1 => Layout::Hwc,
        t => return Err(Error::Format(format!("unknown layout tag {t}"))),
    };
    let d: Vec<usize> =
        (0..4).map(|i| u32::from_le_bytes(h[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes")) as usize).collect();
    let dims = match h[6] {
        0 if d[3] == 1 => Dims::activation(d[0], d[1], d[2]),
        0 => return Err(Error::Format("activation with a fourth dimension".into())),
        1 => Dims::weight(d[0], d[1], d[2], d[3]),
        t => return Err(Error::Format(format!("unknown tensor kind {t}"))),
    };
    let transposed = match h[7] {
        0 => false,
        1 => true,
        f => return Err(Error::Format(format!("unknown flags {f:#x}"))),
    };
    let count = u64::from_le_bytes(h[24..32].try_into().expect("8 bytes")) as usize;
    if count != dims.len() {
        return Err(Error::Format(format!("header counts {count} elements for {dims:?}")));
    }
    let width = if h[4] == 0 { 4 } else { 2 };
    let mut raw = vec![0u8; count * width];
    input.read_exact(&mut raw)?;
    let flavor = half_flavor();
    let data = match h[4] {
        0 => Buffer::F32(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect()),
        1 if flavor == HalfFlavor::Ieee => {
            Buffer::F16(raw.chunks_exact(2).map(|b| f16::from_le_bytes([b[0], b[1]])).collect())
        }
        2 if flavor == HalfFlavor::Bf16 => {
            Buffer::Bf16(raw.chunks_exact(2).map(|b| bf16::from_le_bytes([b[0], b[1]])).collect())
        }
        1 | 2 => return Err(Error::Format(format!("16-bit encoding does not match the active {flavor:?} flavor"))),
        t => return Err(Error::Format(format!("unknown element tag {t}"))),
    };
    Tensor::from_buffer(dims, layout, transposed, data)
}

pub fn save(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    read_tensor(BufReader::new(File::open(path)?))
}
